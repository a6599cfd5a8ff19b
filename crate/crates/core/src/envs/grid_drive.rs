use rand::Rng;
use serde::{Deserialize, Serialize};

pub const GRID: usize = 16;
pub const GRID_CELLS: usize = GRID * GRID;
pub const SCALARS: usize = 4;

pub const ROAD: f32 = 0.0;
pub const OFF_ROAD: f32 = 0.5;
pub const OBSTACLE: f32 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridDriveConfig {
    pub segments: usize,
    pub segment_min: f64,
    pub segment_max: f64,
    pub max_turn: f64,
    pub road_half_width: f64,
    pub crossers: usize,
    pub crosser_amplitude: f64,
    pub crosser_omega: f64,
    /// Static obstacles per segment, placed beside the road.
    pub static_per_segment: usize,
    pub dt: f64,
    pub v_max: f64,
    pub accel: f64,
    pub brake: f64,
    pub max_curvature: f64,
    /// World size of one observation cell.
    pub obs_resolution: f64,
    pub max_steps: usize,
    /// Leaving the road by more than this ends the episode.
    pub lost_distance: f64,
    pub lookahead: f64,
    pub hazard_ahead: f64,
    pub hazard_lateral: f64,
    /// Distance past a crossing line the expert treats as cleared.
    pub clear_margin: f64,
}

impl Default for GridDriveConfig {
    fn default() -> Self {
        Self {
            segments: 6,
            segment_min: 8.0,
            segment_max: 12.0,
            max_turn: 0.6,
            road_half_width: 2.0,
            crossers: 2,
            crosser_amplitude: 3.5,
            crosser_omega: 0.5,
            static_per_segment: 1,
            dt: 0.1,
            v_max: 3.0,
            accel: 2.0,
            brake: 4.0,
            max_curvature: 0.5,
            obs_resolution: 0.75,
            max_steps: 400,
            lost_distance: 4.0,
            lookahead: 3.0,
            hazard_ahead: 6.0,
            hazard_lateral: 2.0,
            clear_margin: 1.5,
        }
    }
}

impl GridDriveConfig {
    /// Twice the route length and episode budget.
    pub fn long() -> Self {
        let base = Self::default();
        Self {
            segments: base.segments * 2,
            crossers: base.crossers * 2,
            max_steps: base.max_steps * 2,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub points: Vec<[f64; 2]>,
    /// Arc length at each vertex.
    pub cum: Vec<f64>,
}

/// Projection of a point onto the route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub s: f64,
    /// Signed distance, positive to the left of travel.
    pub lateral: f64,
    pub segment: usize,
}

impl Route {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        let mut cum = vec![0.0];
        for w in points.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cum.push(cum.last().unwrap() + d);
        }
        Self { points, cum }
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    pub fn project(&self, p: [f64; 2]) -> Projection {
        let mut best = Projection {
            s: 0.0,
            lateral: f64::INFINITY,
            segment: 0,
        };
        let mut best_d2 = f64::INFINITY;
        for (i, w) in self.points.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
            let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
            let d2 = (p[0] - cx).powi(2) + (p[1] - cy).powi(2);
            if d2 < best_d2 {
                best_d2 = d2;
                let len = len2.sqrt();
                let cross = (dx * (p[1] - a[1]) - dy * (p[0] - a[0])) / len;
                best = Projection {
                    s: self.cum[i] + t * len,
                    lateral: cross.signum() * d2.sqrt(),
                    segment: i,
                };
            }
        }
        best
    }

    /// Point and unit tangent at arc length `s` (clamped to the route).
    pub fn at(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let s = s.clamp(0.0, self.length());
        let i = match self.cum.iter().position(|&c| c > s) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => self.points.len() - 2,
        };
        let (a, b) = (self.points[i], self.points[i + 1]);
        let len = self.cum[i + 1] - self.cum[i];
        let t = ((s - self.cum[i]) / len).clamp(0.0, 1.0);
        let tan = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        ([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], tan)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Obstacle {
    Static {
        pos: [f64; 2],
    },
    /// Oscillates across the road through `anchor` along `normal`.
    Crosser {
        anchor: [f64; 2],
        normal: [f64; 2],
        phase: f64,
        /// Route arc length of the crossing line.
        s: f64,
    },
}

pub fn cell_of(p: [f64; 2]) -> (i64, i64) {
    (p[0].floor() as i64, p[1].floor() as i64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridDriveEnv {
    pub cfg: GridDriveConfig,
    pub route: Route,
    pub obstacles: Vec<Obstacle>,
    pub pos: [f64; 2],
    pub heading: f64,
    pub speed: f64,
    pub steps: usize,
    pub collisions: u32,
    pub progress: f64,
}

impl GridDriveEnv {
    pub const OBS_DIM: usize = GRID_CELLS + SCALARS;
    pub const ACTION_DIM: usize = 2;

    pub fn new(cfg: GridDriveConfig) -> Self {
        let route = Route::new(vec![[0.0, 0.0], [cfg.segment_min, 0.0]]);
        Self {
            cfg,
            route,
            obstacles: Vec::new(),
            pos: [0.0; 2],
            heading: 0.0,
            speed: 0.0,
            steps: 0,
            collisions: 0,
            progress: 0.0,
        }
    }

    pub fn reset(&mut self, rng: &mut impl Rng) {
        let c = self.cfg;
        let mut pts = vec![[0.0, 0.0]];
        let mut dir = 0.0f64;
        for i in 0..c.segments {
            if i > 0 {
                dir += rng.random_range(-c.max_turn..=c.max_turn);
            }
            let len = rng.random_range(c.segment_min..=c.segment_max);
            let last = *pts.last().unwrap();
            pts.push([last[0] + len * dir.cos(), last[1] + len * dir.sin()]);
        }
        self.route = Route::new(pts);
        let total = self.route.length();

        self.obstacles.clear();
        for i in 0..c.segments {
            for _ in 0..c.static_per_segment {
                let s = rng.random_range(self.route.cum[i]..self.route.cum[i + 1]);
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let off = side * rng.random_range(c.road_half_width + 0.5..=c.road_half_width + 1.5);
                let (p, t) = self.route.at(s);
                self.obstacles.push(Obstacle::Static {
                    pos: [p[0] - t[1] * off, p[1] + t[0] * off],
                });
            }
        }
        let (lo, hi) = (12.0f64.min(total), (total - 8.0).max(12.0f64.min(total)));
        for k in 0..c.crossers {
            let s = lo + (hi - lo) * (k as f64 + 0.5) / c.crossers as f64;
            let (anchor, t) = self.route.at(s);
            self.obstacles.push(Obstacle::Crosser {
                anchor,
                normal: [-t[1], t[0]],
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                s,
            });
        }

        let (_, t0) = self.route.at(0.0);
        let lat = rng.random_range(-0.3..=0.3);
        self.pos = [-t0[1] * lat, t0[0] * lat];
        self.heading = t0[1].atan2(t0[0]) + rng.random_range(-0.1..=0.1);
        self.speed = 0.0;
        self.steps = 0;
        self.collisions = 0;
        self.progress = self.route.project(self.pos).s;
    }

    pub fn obstacle_positions(&self) -> Vec<[f64; 2]> {
        let t = self.steps as f64 * self.cfg.dt;
        self.obstacles
            .iter()
            .map(|o| match *o {
                Obstacle::Static { pos } => pos,
                Obstacle::Crosser {
                    anchor, normal, phase, ..
                } => {
                    let a = self.crosser_offset(phase, t);
                    [anchor[0] + a * normal[0], anchor[1] + a * normal[1]]
                }
            })
            .collect()
    }

    fn crosser_offset(&self, phase: f64, t: f64) -> f64 {
        self.cfg.crosser_amplitude * (self.cfg.crosser_omega * t + phase).sin()
    }

    pub fn overlaps(agent: [f64; 2], obstacles: &[[f64; 2]]) -> bool {
        let c = cell_of(agent);
        obstacles.iter().any(|&o| cell_of(o) == c)
    }

    /// Egocentric 16×16 occupancy grid, row 0 farthest ahead, column 0 to
    /// the left, followed by the scalar features.
    pub fn observe(&self) -> Vec<f32> {
        let res = self.cfg.obs_resolution;
        let (sin, cos) = self.heading.sin_cos();
        let cells: Vec<(i64, i64)> = self.obstacle_positions().into_iter().map(cell_of).collect();
        let half = GRID as f64 / 2.0 - 0.5;
        let mut obs = Vec::with_capacity(Self::OBS_DIM);
        for i in 0..GRID {
            let ahead = (half - i as f64) * res;
            for j in 0..GRID {
                let left = (half - j as f64) * res;
                let p = [
                    self.pos[0] + ahead * cos - left * sin,
                    self.pos[1] + ahead * sin + left * cos,
                ];
                let v = if cells.contains(&cell_of(p)) {
                    OBSTACLE
                } else if self.route.project(p).lateral.abs() > self.cfg.road_half_width {
                    OFF_ROAD
                } else {
                    ROAD
                };
                obs.push(v);
            }
        }
        let proj = self.route.project(self.pos);
        let bearing = self.bearing_to(proj.s + self.cfg.lookahead);
        obs.push((self.speed / self.cfg.v_max) as f32);
        obs.push(bearing.sin() as f32);
        obs.push(bearing.cos() as f32);
        obs.push((proj.lateral / self.cfg.road_half_width) as f32);
        obs
    }

    fn bearing_to(&self, s: f64) -> f64 {
        let (target, _) = self.route.at(s);
        let ang = (target[1] - self.pos[1]).atan2(target[0] - self.pos[0]);
        wrap(ang - self.heading)
    }

    /// Returns `(reward, done, success, collision)`.
    pub fn step(&mut self, action: &[f32]) -> (f32, bool, bool, bool) {
        let c = self.cfg;
        let clean = |v: Option<&f32>| {
            let v = v.copied().unwrap_or(0.0) as f64;
            if v.is_finite() {
                v.clamp(-1.0, 1.0)
            } else {
                0.0
            }
        };
        let steer = clean(action.first());
        let throttle = clean(action.get(1));
        let acc = if throttle >= 0.0 { c.accel } else { c.brake } * throttle;
        self.speed = (self.speed + acc * c.dt).clamp(0.0, c.v_max);
        self.heading = wrap(self.heading + self.speed * steer * c.max_curvature * c.dt);
        self.pos[0] += self.speed * self.heading.cos() * c.dt;
        self.pos[1] += self.speed * self.heading.sin() * c.dt;
        self.steps += 1;

        let proj = self.route.project(self.pos);
        let gained = proj.s - self.progress;
        self.progress = proj.s;
        let collision = Self::overlaps(self.pos, &self.obstacle_positions());
        if collision {
            self.collisions += 1;
        }
        let reward = gained - if collision { 10.0 } else { 0.0 } - 0.01 * steer.abs();
        let arrived = proj.s >= self.route.length() - 0.5;
        let success = arrived && self.collisions == 0;
        let done = collision
            || arrived
            || proj.lateral.abs() > c.road_half_width + c.lost_distance
            || self.steps >= c.max_steps;
        (reward as f32, done, success, collision)
    }

    /// Pure pursuit toward a look-ahead point, braking for anything in the
    /// forward corridor.
    pub fn expert_action(&self) -> Vec<f32> {
        let c = self.cfg;
        let proj = self.route.project(self.pos);
        let (target, _) = self.route.at(proj.s + c.lookahead);
        let dist = ((target[0] - self.pos[0]).powi(2) + (target[1] - self.pos[1]).powi(2))
            .sqrt()
            .max(1e-6);
        let alpha = self.bearing_to(proj.s + c.lookahead);
        let steer = (2.0 * alpha.sin() / dist / c.max_curvature).clamp(-1.0, 1.0);

        let throttle = if self.must_yield(proj.s) { -1.0 } else { 1.0 };
        vec![steer as f32, throttle]
    }

    /// Yield when some crossing line ahead will be occupied before the
    /// agent could clear it and there is still room to stop short of it.
    fn must_yield(&self, s_agent: f64) -> bool {
        let c = self.cfg;
        let now = self.steps as f64 * c.dt;
        let v = self.speed;
        let stop = v * v / (2.0 * c.brake) + v * c.dt;
        self.obstacles.iter().any(|o| {
            let Obstacle::Crosser { phase, s, .. } = *o else {
                return false;
            };
            let d = s - s_agent;
            if d <= c.clear_margin + stop || d > c.hazard_ahead {
                return false;
            }
            // time to pass the line accelerating from the current speed
            let dist = d + c.clear_margin;
            let t_top = (c.v_max - v) / c.accel;
            let d_top = v * t_top + 0.5 * c.accel * t_top * t_top;
            let t_clear = if d_top >= dist {
                (-v + (v * v + 2.0 * c.accel * dist).sqrt()) / c.accel
            } else {
                t_top + (dist - d_top) / c.v_max
            };
            let n = (t_clear / c.dt).ceil() as usize + 1;
            (0..=n).any(|k| self.crosser_offset(phase, now + k as f64 * c.dt).abs() < c.hazard_lateral)
        })
    }

    /// Positions needed to re-check collisions offline:
    /// `[x, y, heading, speed, ox0, oy0, ...]`.
    pub fn state(&self) -> Vec<f32> {
        let mut s = vec![
            self.pos[0] as f32,
            self.pos[1] as f32,
            self.heading as f32,
            self.speed as f32,
        ];
        for o in self.obstacle_positions() {
            s.push(o[0] as f32);
            s.push(o[1] as f32);
        }
        s
    }
}

fn wrap(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let a = a.rem_euclid(tau);
    if a > std::f64::consts::PI {
        a - tau
    } else {
        a
    }
}
