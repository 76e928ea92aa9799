//! Open-loop metrics: ADE, swept-disc collisions, grid-world sub-scores and
//! the PDMS / EPDMS composites.

use std::fmt::Write as _;

use thiserror::Error;

use crate::gridworld::{road_distance, route_for, SceneRecord, Trajectory, DT, HORIZON, LANE_HALF_WIDTH};

pub const EGO_RADIUS: f64 = 1.0;
pub const AGENT_RADIUS: f64 = 1.0;
pub const TTC_HORIZON: f64 = 1.0;
pub const MAX_ACCEL: f64 = 4.0;
pub const MAX_JERK: f64 = 8.0;
pub const MIN_EXPERT_PROGRESS: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("sub-score {name} = {value} outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("malformed trajectory: {0}")]
    Malformed(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no scenarios to aggregate")]
    Empty,
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubScoresV1 {
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub comfort: f64,
    pub ep: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubScoresV2 {
    pub nc: f64,
    pub dac: f64,
    pub ddc: f64,
    pub tlc: f64,
    pub ep: f64,
    pub ttc: f64,
    pub lk: f64,
    pub hc: f64,
    pub ec: f64,
}

fn check(name: &'static str, value: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(EvalError::OutOfRange { name, value })
    }
}

/// `NC * DAC * (5 EP + 5 TTC + 2 C) / 12`.
pub fn pdms(s: &SubScoresV1) -> Result<f64> {
    let nc = check("nc", s.nc)?;
    let dac = check("dac", s.dac)?;
    let ttc = check("ttc", s.ttc)?;
    let c = check("comfort", s.comfort)?;
    let ep = check("ep", s.ep)?;
    Ok(nc * dac * (5.0 * ep + 5.0 * ttc + 2.0 * c) / 12.0)
}

/// `NC * DAC * DDC * TLC * (5 EP + 5 TTC + 2 LK + 2 HC + 2 EC) / 16`.
pub fn epdms(s: &SubScoresV2) -> Result<f64> {
    let gate = check("nc", s.nc)? * check("dac", s.dac)? * check("ddc", s.ddc)? * check("tlc", s.tlc)?;
    let weighted = 5.0 * check("ep", s.ep)?
        + 5.0 * check("ttc", s.ttc)?
        + 2.0 * check("lk", s.lk)?
        + 2.0 * check("hc", s.hc)?
        + 2.0 * check("ec", s.ec)?;
    Ok(gate * weighted / 16.0)
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm(a: [f64; 2]) -> f64 {
    dot(a, a).sqrt()
}

/// Ego positions at t = 0, 0.5, ..., 3 s (origin first).
pub fn ego_positions(t: &Trajectory) -> [[f64; 2]; HORIZON + 1] {
    let mut out = [[0.0; 2]; HORIZON + 1];
    out[1..].copy_from_slice(&t.0);
    out
}

/// Agent positions at t = 0, ..., 3 s; the t = 0 position is extrapolated
/// back from the first two future samples at constant velocity.
pub fn agent_positions(future: &[[f64; 2]; HORIZON]) -> [[f64; 2]; HORIZON + 1] {
    let mut out = [[0.0; 2]; HORIZON + 1];
    out[0] = [2.0 * future[0][0] - future[1][0], 2.0 * future[0][1] - future[1][1]];
    out[1..].copy_from_slice(future);
    out
}

/// Minimum distance between two points moving linearly over one interval.
pub fn segment_min_distance(p0: [f64; 2], p1: [f64; 2], q0: [f64; 2], q1: [f64; 2]) -> f64 {
    let d0 = sub(q0, p0);
    let dd = sub(sub(q1, p1), d0);
    let den = dot(dd, dd);
    let tau = if den > 0.0 {
        (-dot(d0, dd) / den).clamp(0.0, 1.0)
    } else {
        0.0
    };
    norm([d0[0] + dd[0] * tau, d0[1] + dd[1] * tau])
}

/// Minimum centre distance between the ego path and an agent path, both
/// piecewise linear between matching timestamps.
pub fn swept_min_distance(ego: &[[f64; 2]], agent: &[[f64; 2]]) -> f64 {
    ego.windows(2)
        .zip(agent.windows(2))
        .map(|(p, q)| segment_min_distance(p[0], p[1], q[0], q[1]))
        .fold(f64::INFINITY, f64::min)
}

/// Earliest `t >= 0` at which two constant-velocity discs touch, or infinity.
pub fn time_to_collision(rel_pos: [f64; 2], rel_vel: [f64; 2], contact: f64) -> f64 {
    let c = dot(rel_pos, rel_pos) - contact * contact;
    if c <= 0.0 {
        return 0.0;
    }
    let a = dot(rel_vel, rel_vel);
    let b = 2.0 * dot(rel_pos, rel_vel);
    if a == 0.0 || b >= 0.0 {
        return f64::INFINITY;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return f64::INFINITY;
    }
    (-b - disc.sqrt()) / (2.0 * a)
}

/// Smallest constant-velocity time-to-collision over the plan's segments.
pub fn min_time_to_collision(ego: &[[f64; 2]], agent: &[[f64; 2]]) -> f64 {
    let contact = EGO_RADIUS + AGENT_RADIUS;
    ego.windows(2)
        .zip(agent.windows(2))
        .map(|(p, q)| {
            let u = [(p[1][0] - p[0][0]) / DT, (p[1][1] - p[0][1]) / DT];
            let w = [(q[1][0] - q[0][0]) / DT, (q[1][1] - q[0][1]) / DT];
            time_to_collision(sub(q[0], p[0]), sub(w, u), contact)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Largest finite-difference acceleration and jerk magnitudes of a plan that
/// starts at `speed` along the ego heading.
pub fn accel_jerk(t: &Trajectory, speed: f64) -> (f64, f64) {
    let p = ego_positions(t);
    let mut vel = [[0.0; 2]; HORIZON + 1];
    vel[0] = [speed, 0.0];
    for i in 1..=HORIZON {
        vel[i] = [(p[i][0] - p[i - 1][0]) / DT, (p[i][1] - p[i - 1][1]) / DT];
    }
    let mut acc = [[0.0; 2]; HORIZON];
    for i in 0..HORIZON {
        acc[i] = [(vel[i + 1][0] - vel[i][0]) / DT, (vel[i + 1][1] - vel[i][1]) / DT];
    }
    let max_a = acc.iter().map(|&a| norm(a)).fold(0.0, f64::max);
    let max_j = acc
        .windows(2)
        .map(|a| norm([(a[1][0] - a[0][0]) / DT, (a[1][1] - a[0][1]) / DT]))
        .fold(0.0, f64::max);
    (max_a, max_j)
}

/// Progress of the final waypoint along the commanded route.
pub fn route_progress(t: &Trajectory, record: &SceneRecord) -> f64 {
    let pose = record.ego.pose();
    let (route, _, _) = route_for(&pose, record.command);
    let s0 = route.project([pose.x, pose.y]).s;
    let s1 = route.project(pose.to_world(t.0[HORIZON - 1])).s;
    s1 - s0
}

fn gate(ok: bool) -> f64 {
    if ok {
        1.0
    } else {
        0.0
    }
}

pub fn score_scenario(pred: &Trajectory, record: &SceneRecord) -> Result<SubScoresV1> {
    if !pred.is_finite() {
        return Err(EvalError::Malformed("non-finite waypoint".into()));
    }
    let ego = ego_positions(pred);
    let contact = EGO_RADIUS + AGENT_RADIUS;
    let mut collide = false;
    let mut min_ttc = f64::INFINITY;
    for future in record.agents() {
        let agent = agent_positions(future);
        collide |= swept_min_distance(&ego, &agent) < contact;
        min_ttc = min_ttc.min(min_time_to_collision(&ego, &agent));
    }
    let pose = record.ego.pose();
    let drivable = pred
        .0
        .iter()
        .all(|&p| road_distance(pose.to_world(p)) <= LANE_HALF_WIDTH);
    let (a, j) = accel_jerk(pred, record.ego.speed);
    let expert_progress = route_progress(&record.expert, record);
    let ep = if expert_progress < MIN_EXPERT_PROGRESS {
        1.0
    } else {
        (route_progress(pred, record) / expert_progress).clamp(0.0, 1.0)
    };
    Ok(SubScoresV1 {
        nc: gate(!collide),
        dac: gate(drivable),
        ttc: gate(min_ttc > TTC_HORIZON),
        comfort: gate(a <= MAX_ACCEL && j <= MAX_JERK),
        ep,
    })
}

pub fn ade(pred: &[[f64; 2]], expert: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != expert.len() {
        return Err(EvalError::LengthMismatch(pred.len(), expert.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(pred.iter().zip(expert).map(|(a, b)| norm(sub(*a, *b))).sum::<f64>() / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioResult {
    pub id: String,
    pub ade: f64,
    pub scores: SubScoresV1,
    pub pdms: f64,
}

impl ScenarioResult {
    pub fn new(id: String, pred: &Trajectory, record: &SceneRecord) -> Result<Self> {
        let scores = score_scenario(pred, record)?;
        Ok(Self {
            id,
            ade: ade(&pred.0, &record.expert.0)?,
            pdms: pdms(&scores)?,
            scores,
        })
    }
}

pub fn collision_rate(results: &[ScenarioResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(results.iter().filter(|r| r.scores.nc == 0.0).count() as f64 / results.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub ade: f64,
    pub scores: SubScoresV1,
    /// Mean of per-scenario PDMS (not PDMS of the mean sub-scores).
    pub pdms: f64,
    pub collision_rate: f64,
    pub count: usize,
}

pub fn aggregate(results: &[ScenarioResult]) -> Result<Aggregate> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = results.len() as f64;
    let mean = |f: &dyn Fn(&ScenarioResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    Ok(Aggregate {
        ade: mean(&|r| r.ade),
        scores: SubScoresV1 {
            nc: mean(&|r| r.scores.nc),
            dac: mean(&|r| r.scores.dac),
            ttc: mean(&|r| r.scores.ttc),
            comfort: mean(&|r| r.scores.comfort),
            ep: mean(&|r| r.scores.ep),
        },
        pdms: mean(&|r| r.pdms),
        collision_rate: collision_rate(results)?,
        count: results.len(),
    })
}

pub const REPORT_HEADER: &str = "scenario_id,ade_m,nc,dac,ttc,comfort,ep,pdms";

/// Report CSV with one row per scenario and a trailing `AGG` row.
pub fn report_csv(results: &[ScenarioResult]) -> Result<String> {
    let agg = aggregate(results)?;
    let mut out = String::new();
    out.push_str(REPORT_HEADER);
    out.push('\n');
    let row = |out: &mut String, id: &str, ade: f64, s: &SubScoresV1, p: f64| {
        let _ = writeln!(
            out,
            "{id},{ade:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{p:.6}",
            s.nc, s.dac, s.ttc, s.comfort, s.ep
        );
    };
    for r in results {
        row(&mut out, &r.id, r.ade, &r.scores, r.pdms);
    }
    row(&mut out, "AGG", agg.ade, &agg.scores, agg.pdms);
    Ok(out)
}

pub fn scenario_id(record: &SceneRecord) -> String {
    format!("{}:{}", record.clip_id, record.frame)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones() -> SubScoresV1 {
        SubScoresV1 {
            nc: 1.0,
            dac: 1.0,
            ttc: 1.0,
            comfort: 1.0,
            ep: 1.0,
        }
    }

    #[test]
    fn pdms_human_row() {
        let s = SubScoresV1 {
            comfort: 0.999,
            ep: 0.875,
            ..ones()
        };
        assert!((pdms(&s).unwrap() - 0.94775).abs() < 1e-12);
        assert_eq!(pdms(&ones()).unwrap(), 1.0);
        assert_eq!(pdms(&SubScoresV1 { nc: 0.0, ..ones() }).unwrap(), 0.0);
    }

    #[test]
    fn pdms_rejects_out_of_range() {
        let e = pdms(&SubScoresV1 { ep: 1.5, ..ones() }).unwrap_err();
        assert_eq!(e, EvalError::OutOfRange { name: "ep", value: 1.5 });
    }

    #[test]
    fn epdms_weighted_midpoint() {
        let s = SubScoresV2 {
            nc: 1.0,
            dac: 1.0,
            ddc: 1.0,
            tlc: 1.0,
            ep: 1.0,
            ttc: 1.0,
            lk: 0.0,
            hc: 0.0,
            ec: 0.0,
        };
        assert_eq!(epdms(&s).unwrap(), 0.625);
        assert_eq!(epdms(&SubScoresV2 { tlc: 0.0, ..s }).unwrap(), 0.0);
    }

    #[test]
    fn ade_constant_offset() {
        let a = [[0.0, 0.0], [1.0, 1.0]];
        let b = [[1.0, 0.0], [1.0, 2.0]];
        assert_eq!(ade(&a, &a).unwrap(), 0.0);
        assert_eq!(ade(&a, &b).unwrap(), 1.0);
        assert!(ade(&a, &b[..1]).is_err());
    }

    #[test]
    fn segment_distance_crossing_paths() {
        // Head-on along x: they meet at the midpoint.
        let d = segment_min_distance([0.0, 0.0], [4.0, 0.0], [4.0, 0.5], [0.0, 0.5]);
        assert!((d - 0.5).abs() < 1e-12);
        // Minimum at an endpoint.
        let d = segment_min_distance([0.0, 0.0], [1.0, 0.0], [5.0, 0.0], [7.0, 0.0]);
        assert!((d - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ttc_closed_form() {
        assert_eq!(time_to_collision([10.0, 0.0], [-4.0, 0.0], 2.0), 2.0);
        assert_eq!(time_to_collision([1.0, 0.0], [0.0, 0.0], 2.0), 0.0);
        assert!(time_to_collision([10.0, 0.0], [4.0, 0.0], 2.0).is_infinite());
        assert!(time_to_collision([10.0, 5.0], [-4.0, 0.0], 2.0).is_infinite());
    }

    #[test]
    fn comfort_of_constant_speed_line() {
        let t = Trajectory(std::array::from_fn(|i| [2.5 * (i + 1) as f64, 0.0]));
        let (a, j) = accel_jerk(&t, 5.0);
        assert!(a < 1e-12 && j < 1e-12);
    }

    #[test]
    fn aggregate_averages_per_scenario() {
        let good = ScenarioResult {
            id: "a".into(),
            ade: 0.0,
            scores: ones(),
            pdms: 1.0,
        };
        let bad_scores = SubScoresV1 {
            nc: 0.0,
            ttc: 0.0,
            ..ones()
        };
        let bad = ScenarioResult {
            id: "b".into(),
            ade: 2.0,
            pdms: pdms(&bad_scores).unwrap(),
            scores: bad_scores,
        };
        let agg = aggregate(&[good, bad]).unwrap();
        assert_eq!(agg.pdms, 0.5);
        assert!((pdms(&agg.scores).unwrap() - 0.5 * (5.0 + 2.5 + 2.0) / 12.0).abs() < 1e-12);
        assert_ne!(agg.pdms, pdms(&agg.scores).unwrap());
        assert_eq!(agg.collision_rate, 0.5);
    }
}
