//! Road map and planar geometry.
//!
//! The map is fixed: a straight main road along the world x axis with a
//! junction at the origin, where a left and a right branch turn off through
//! quarter circles of radius [`TURN_RADIUS`] and continue straight. A scene is
//! fully described by poses on this map, which is what lets a dataset record
//! carry only the ego pose and still be scored against lane geometry.

use std::f64::consts::{FRAC_PI_2, PI};

pub const LANE_HALF_WIDTH: f64 = 2.5;
pub const TURN_RADIUS: f64 = 12.0;
const FAR: f64 = 1.0e4;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }

    /// World point of an ego-frame offset (forward, left).
    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Ego-frame coordinates (forward, left) of a world point.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI) % (2.0 * PI);
    if a < 0.0 {
        a += 2.0 * PI;
    }
    a - PI
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Piece {
    Line {
        from: [f64; 2],
        to: [f64; 2],
    },
    /// Circle arc starting at polar angle `start` around `center`; `sweep` is
    /// signed (positive = counter-clockwise = left turn).
    Arc {
        center: [f64; 2],
        radius: f64,
        start: f64,
        sweep: f64,
    },
}

impl Piece {
    fn length(&self) -> f64 {
        match *self {
            Piece::Line { from, to } => ((to[0] - from[0]).powi(2) + (to[1] - from[1]).powi(2)).sqrt(),
            Piece::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Point and tangent heading at arc length `u` from the piece start.
    fn at(&self, u: f64) -> ([f64; 2], f64) {
        match *self {
            Piece::Line { from, to } => {
                let len = self.length();
                let (dx, dy) = ((to[0] - from[0]) / len, (to[1] - from[1]) / len);
                ([from[0] + dx * u, from[1] + dy * u], dy.atan2(dx))
            }
            Piece::Arc {
                center,
                radius,
                start,
                sweep,
            } => {
                let a = start + sweep.signum() * u / radius;
                let p = [center[0] + radius * a.cos(), center[1] + radius * a.sin()];
                (p, wrap_angle(a + sweep.signum() * FRAC_PI_2))
            }
        }
    }

    /// Arc length of the closest point (clamped to the piece) and its distance.
    fn project(&self, p: [f64; 2]) -> (f64, f64) {
        match *self {
            Piece::Line { from, to } => {
                let len = self.length();
                let (dx, dy) = ((to[0] - from[0]) / len, (to[1] - from[1]) / len);
                let u = ((p[0] - from[0]) * dx + (p[1] - from[1]) * dy).clamp(0.0, len);
                let q = [from[0] + dx * u, from[1] + dy * u];
                (u, ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
            }
            Piece::Arc {
                center,
                radius,
                start,
                sweep,
            } => {
                let ang = (p[1] - center[1]).atan2(p[0] - center[0]);
                let rel = wrap_angle((ang - start) * sweep.signum());
                let span = sweep.abs();
                let rel = if (0.0..=span).contains(&rel) {
                    rel
                } else {
                    // Nearest endpoint.
                    let d0 = wrap_angle(rel).abs();
                    let d1 = wrap_angle(rel - span).abs();
                    if d0 <= d1 {
                        0.0
                    } else {
                        span
                    }
                };
                let u = rel * radius;
                let (q, _) = self.at(u);
                (u, ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
            }
        }
    }

    fn curvature(&self) -> f64 {
        match *self {
            Piece::Line { .. } => 0.0,
            Piece::Arc { radius, sweep, .. } => sweep.signum() / radius,
        }
    }
}

/// A lane centerline made of consecutive pieces, parameterised by arc length.
#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pieces: Vec<Piece>,
    offsets: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Straight,
    Left,
    Right,
}

#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub s: f64,
    pub distance: f64,
}

impl Route {
    fn from_pieces(pieces: Vec<Piece>) -> Self {
        let mut offsets = Vec::with_capacity(pieces.len());
        let mut acc = 0.0;
        for p in &pieces {
            offsets.push(acc);
            acc += p.length();
        }
        Self { pieces, offsets }
    }

    pub fn branch(b: Branch) -> Self {
        let r = TURN_RADIUS;
        match b {
            Branch::Straight => Self::from_pieces(vec![Piece::Line {
                from: [-FAR, 0.0],
                to: [FAR, 0.0],
            }]),
            Branch::Left => Self::from_pieces(vec![
                Piece::Line {
                    from: [-FAR, 0.0],
                    to: [0.0, 0.0],
                },
                Piece::Arc {
                    center: [0.0, r],
                    radius: r,
                    start: -FRAC_PI_2,
                    sweep: FRAC_PI_2,
                },
                Piece::Line {
                    from: [r, r],
                    to: [r, FAR],
                },
            ]),
            Branch::Right => Self::from_pieces(vec![
                Piece::Line {
                    from: [-FAR, 0.0],
                    to: [0.0, 0.0],
                },
                Piece::Arc {
                    center: [0.0, -r],
                    radius: r,
                    start: FRAC_PI_2,
                    sweep: -FRAC_PI_2,
                },
                Piece::Line {
                    from: [r, -r],
                    to: [r, -FAR],
                },
            ]),
        }
    }

    pub fn length(&self) -> f64 {
        self.offsets.last().unwrap() + self.pieces.last().unwrap().length()
    }

    pub fn project(&self, p: [f64; 2]) -> Projection {
        let mut best = Projection {
            s: 0.0,
            distance: f64::INFINITY,
        };
        for (piece, &off) in self.pieces.iter().zip(&self.offsets) {
            let (u, d) = piece.project(p);
            if d < best.distance {
                best = Projection {
                    s: off + u,
                    distance: d,
                };
            }
        }
        best
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length());
        let i = self.offsets.iter().rposition(|&o| o <= s).unwrap_or_default();
        (i, s - self.offsets[i])
    }

    /// Point and tangent heading at arc length `s`.
    pub fn at(&self, s: f64) -> ([f64; 2], f64) {
        let (i, u) = self.locate(s);
        self.pieces[i].at(u)
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        let (i, _) = self.locate(s);
        self.pieces[i].curvature()
    }

    /// Arc-length spans `[start, end)` of curved pieces.
    pub fn curves(&self) -> Vec<(f64, f64, f64)> {
        self.pieces
            .iter()
            .zip(&self.offsets)
            .filter(|(p, _)| p.curvature() != 0.0)
            .map(|(p, &o)| (o, o + p.length(), p.curvature().abs()))
            .collect()
    }
}

/// Distance from a world point to the nearest lane centerline of the map.
pub fn road_distance(p: [f64; 2]) -> f64 {
    [Branch::Straight, Branch::Left, Branch::Right]
        .iter()
        .map(|&b| route_cache(b).project(p).distance)
        .fold(f64::INFINITY, f64::min)
}

pub fn route_cache(b: Branch) -> &'static Route {
    use std::sync::OnceLock;
    static ROUTES: OnceLock<[Route; 3]> = OnceLock::new();
    let r = ROUTES.get_or_init(|| {
        [
            Route::branch(Branch::Straight),
            Route::branch(Branch::Left),
            Route::branch(Branch::Right),
        ]
    });
    match b {
        Branch::Straight => &r[0],
        Branch::Left => &r[1],
        Branch::Right => &r[2],
    }
}
