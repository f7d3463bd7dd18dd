//! Planar mobile-manipulation world: unicycle base, 2-link arm, one
//! graspable object, axis-aligned obstacles, and a rectangular goal region.
//! Everything is a deterministic function of (seed, task, action sequence).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use incom_core::io::FormatError;
use incom_core::rng::{self, stream};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config: unknown task '{0}'")]
    UnknownTask(String),
    #[error("usage: step called on terminal episode")]
    Terminal,
    #[error("expert success rate {rate:.2} below 0.5 over {attempts} attempts; environment misconfigured")]
    ExpertFailing { rate: f64, attempts: usize },
    #[error("format: {0}")]
    Format(#[from] FormatError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum Phase {
    Navigate = 0,
    Reach = 1,
    Grasp = 2,
    Transport = 3,
    Place = 4,
}

impl Phase {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Phase> {
        match i {
            0 => Some(Phase::Navigate),
            1 => Some(Phase::Reach),
            2 => Some(Phase::Grasp),
            3 => Some(Phase::Transport),
            4 => Some(Phase::Place),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Navigate => "NAVIGATE",
            Phase::Reach => "REACH",
            Phase::Grasp => "GRASP",
            Phase::Transport => "TRANSPORT",
            Phase::Place => "PLACE",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.cx).abs() <= self.w / 2.0 && (y - self.cy).abs() <= self.h / 2.0
    }

    pub fn inflate(&self, m: f64) -> Rect {
        Rect { cx: self.cx, cy: self.cy, w: self.w + 2.0 * m, h: self.h + 2.0 * m }
    }

    /// Distance from a point to this rectangle (0 inside).
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        let dx = ((x - self.cx).abs() - self.w / 2.0).max(0.0);
        let dy = ((y - self.cy).abs() - self.h / 2.0).max(0.0);
        (dx * dx + dy * dy).sqrt()
    }

    /// Slab test: does the segment a→b pass through this rectangle?
    pub fn intersects_segment(&self, a: (f64, f64), b: (f64, f64)) -> bool {
        let (x0, x1) = (self.cx - self.w / 2.0, self.cx + self.w / 2.0);
        let (y0, y1) = (self.cy - self.h / 2.0, self.cy + self.h / 2.0);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let mut t_min = 0.0f64;
        let mut t_max = 1.0f64;
        for (p, d, lo, hi) in [(a.0, dx, x0, x1), (a.1, dy, y0, y1)] {
            if d.abs() < 1e-12 {
                if p < lo || p > hi {
                    return false;
                }
            } else {
                let (mut t0, mut t1) = ((lo - p) / d, (hi - p) / d);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                t_min = t_min.max(t0);
                t_max = t_max.min(t1);
                if t_min > t_max {
                    return false;
                }
            }
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub base_pose: (f64, f64, f64),
    pub arm_angles: [f64; 2],
    pub gripper: f64,
    pub object_pose: (f64, f64),
    pub goal_region: Rect,
    pub obstacles: Vec<Rect>,
    pub phase: Phase,
    pub grasped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub base: [f64; 2],
    pub arm: [f64; 3],
}

impl Action {
    pub const ZERO: Action = Action { base: [0.0; 2], arm: [0.0; 3] };
}

#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    pub phase: Phase,
    pub success: bool,
    pub collided: bool,
    pub clamped: bool,
    pub terminal: bool,
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub world_w: f64,
    pub world_h: f64,
    pub dt: f64,
    pub v_max: f64,
    pub w_max: f64,
    /// max joint speed, rad/s
    pub arm_rate: f64,
    pub l1: f64,
    pub l2: f64,
    pub base_radius: f64,
    pub grasp_radius: f64,
    /// base-to-object distance that flips NAVIGATE→REACH
    pub reach_standoff: f64,
    /// base-to-goal distance that flips TRANSPORT→PLACE
    pub place_standoff: f64,
    pub k_pts: usize,
    pub h_img: usize,
    pub w_img: usize,
    pub max_steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            world_w: 5.0,
            world_h: 5.0,
            dt: 0.1,
            v_max: 0.5,
            w_max: 1.0,
            arm_rate: 2.0,
            l1: 0.35,
            l2: 0.30,
            base_radius: 0.25,
            grasp_radius: 0.08,
            reach_standoff: 0.45,
            place_standoff: 0.55,
            k_pts: 64,
            h_img: 32,
            w_img: 32,
            max_steps: 300,
        }
    }
}

pub const D_BASE: usize = 2;
pub const D_ARM: usize = 3;
pub const PROPRIO_DIM: usize = 8;
/// per-point layout: (x, y, one-hot obstacle/object/floor)
pub const POINT_DIM: usize = 5;
pub const N_VIEWS: usize = 2;
pub const IMG_CHANNELS: usize = 3;

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)
        - std::f64::consts::PI;
    if a <= -std::f64::consts::PI {
        a = std::f64::consts::PI;
    }
    a
}

#[derive(Clone, Debug)]
pub struct TaskLayout {
    pub base_start: (f64, f64, f64),
    pub object: (f64, f64),
    pub goal: Rect,
    pub obstacles: Vec<Rect>,
}

/// Samples a world layout from a seeded rng. Implementations must keep the
/// straight paths base→object and object→goal clear of obstacles so the
/// scripted expert stays competent.
pub trait TaskSampler: Send + Sync {
    fn name(&self) -> &'static str;
    fn sample(&self, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> TaskLayout;
}

struct PickPlace {
    n_obstacles: usize,
    name: &'static str,
}

impl TaskSampler for PickPlace {
    fn name(&self) -> &'static str {
        self.name
    }

    fn sample(&self, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> TaskLayout {
        let margin = 0.5;
        let pt = |rng: &mut ChaCha8Rng| {
            (
                rng.random_range(margin..cfg.world_w - margin),
                rng.random_range(margin..cfg.world_h - margin),
            )
        };
        let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        let base = pt(rng);
        let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let object = loop {
            let p = pt(rng);
            let d = dist(p, base);
            if (1.2..=3.0).contains(&d) {
                break p;
            }
        };
        let goal_c = loop {
            let p = pt(rng);
            let d = dist(p, object);
            if (1.0..=2.2).contains(&d) && dist(p, base) >= 0.8 {
                break p;
            }
        };
        let goal = Rect { cx: goal_c.0, cy: goal_c.1, w: 0.5, h: 0.5 };
        // corridor clearance: obstacles may not block base→object or
        // object→goal, nor sit on any keypoint
        let clearance = cfg.base_radius + 0.15;
        let mut obstacles = Vec::new();
        for _ in 0..self.n_obstacles {
            let mut placed = false;
            for _ in 0..200 {
                let c = pt(rng);
                let w = rng.random_range(0.3..0.8);
                let h = rng.random_range(0.3..0.8);
                let r = Rect { cx: c.0, cy: c.1, w, h };
                let infl = r.inflate(clearance);
                let overlaps = |a: &Rect, b: &Rect| {
                    (a.cx - b.cx).abs() < (a.w + b.w) / 2.0 + 0.1
                        && (a.cy - b.cy).abs() < (a.h + b.h) / 2.0 + 0.1
                };
                let blocks = infl.intersects_segment(base, object)
                    || infl.intersects_segment(object, goal_c)
                    || infl.distance(goal.cx, goal.cy) < goal.w / 2.0 + clearance
                    || obstacles.iter().any(|o: &Rect| overlaps(o, &r));
                if !blocks {
                    obstacles.push(r);
                    placed = true;
                    break;
                }
            }
            let _ = placed; // a skipped obstacle is acceptable; layout stays valid
        }
        TaskLayout { base_start: (base.0, base.1, theta), object, goal, obstacles }
    }
}

pub fn task_registry() -> Vec<Box<dyn TaskSampler>> {
    vec![
        Box::new(PickPlace { n_obstacles: 1, name: "pickplace-1obs" }),
        Box::new(PickPlace { n_obstacles: 2, name: "pickplace-2obs" }),
        Box::new(PickPlace { n_obstacles: 3, name: "pickplace-3obs" }),
    ]
}

pub fn task_by_name(name: &str) -> Result<Box<dyn TaskSampler>, SimError> {
    task_registry()
        .into_iter()
        .find(|t| t.name() == name)
        .ok_or_else(|| SimError::UnknownTask(name.to_string()))
}

#[derive(Debug)]
pub struct World {
    pub cfg: SimConfig,
    pub state: WorldState,
    pub steps: usize,
    pub terminal: bool,
    pub success: bool,
    pub collided: bool,
    was_grasped: bool,
}

impl World {
    pub fn reset(cfg: SimConfig, seed: u64, task: &str) -> Result<World, SimError> {
        let sampler = task_by_name(task)?;
        let mut rng = rng::seeded(seed, stream::TASK);
        let layout = sampler.sample(&cfg, &mut rng);
        let state = WorldState {
            base_pose: layout.base_start,
            arm_angles: [0.0, 2.8], // tucked, elbow-up to match the IK branch
            gripper: 1.0,
            object_pose: layout.object,
            goal_region: layout.goal,
            obstacles: layout.obstacles,
            phase: Phase::Navigate,
            grasped: false,
        };
        Ok(World {
            cfg,
            state,
            steps: 0,
            terminal: false,
            success: false,
            collided: false,
            was_grasped: false,
        })
    }

    /// End-effector position in the world frame.
    pub fn ee_pose(cfg: &SimConfig, s: &WorldState) -> (f64, f64) {
        let (q1, q2) = (s.arm_angles[0], s.arm_angles[1]);
        let ex = cfg.l1 * q1.cos() + cfg.l2 * (q1 + q2).cos();
        let ey = cfg.l1 * q1.sin() + cfg.l2 * (q1 + q2).sin();
        let (x, y, th) = s.base_pose;
        (x + ex * th.cos() - ey * th.sin(), y + ex * th.sin() + ey * th.cos())
    }

    pub fn step(&mut self, action: &Action) -> Result<StepInfo, SimError> {
        if self.terminal {
            return Err(SimError::Terminal);
        }
        let cfg = &self.cfg;
        let mut clamped = false;
        let mut cl = |v: f64| {
            if !(-1.0..=1.0).contains(&v) {
                clamped = true;
            }
            v.clamp(-1.0, 1.0)
        };
        let (av, aw) = (cl(action.base[0]), cl(action.base[1]));
        let (a1, a2, ag) = (cl(action.arm[0]), cl(action.arm[1]), cl(action.arm[2]));

        // unicycle with pre-update heading for the translation
        let s = &mut self.state;
        let (x, y, th) = s.base_pose;
        let v = av * cfg.v_max;
        let w = aw * cfg.w_max;
        let nx = (x + v * th.cos() * cfg.dt).clamp(cfg.base_radius, cfg.world_w - cfg.base_radius);
        let ny = (y + v * th.sin() * cfg.dt).clamp(cfg.base_radius, cfg.world_h - cfg.base_radius);
        let nth = wrap_angle(th + w * cfg.dt);
        s.base_pose = (nx, ny, nth);

        let lim = std::f64::consts::PI;
        s.arm_angles[0] = (s.arm_angles[0] + a1 * cfg.arm_rate * cfg.dt).clamp(-lim, lim);
        s.arm_angles[1] = (s.arm_angles[1] + a2 * cfg.arm_rate * cfg.dt).clamp(-lim, lim);
        s.gripper = (s.gripper - 0.4 * ag).clamp(0.0, 1.0);

        let ee = Self::ee_pose(cfg, s);
        let d_obj = ((ee.0 - s.object_pose.0).powi(2) + (ee.1 - s.object_pose.1).powi(2)).sqrt();
        if s.grasped && s.gripper >= 0.5 {
            s.grasped = false;
        } else if !s.grasped && s.gripper < 0.5 && d_obj <= cfg.grasp_radius {
            s.grasped = true;
            self.was_grasped = true;
        }
        if s.grasped {
            s.object_pose = ee;
        }

        for ob in &s.obstacles {
            if ob.distance(nx, ny) < cfg.base_radius {
                self.collided = true;
                self.terminal = true;
            }
        }

        // phases latch forward, one transition per step
        let d_base_obj =
            ((nx - s.object_pose.0).powi(2) + (ny - s.object_pose.1).powi(2)).sqrt();
        let d_base_goal =
            ((nx - s.goal_region.cx).powi(2) + (ny - s.goal_region.cy).powi(2)).sqrt();
        let d_ee_obj = ((ee.0 - s.object_pose.0).powi(2) + (ee.1 - s.object_pose.1).powi(2)).sqrt();
        s.phase = match s.phase {
            Phase::Navigate if d_base_obj <= cfg.reach_standoff => Phase::Reach,
            Phase::Reach if d_ee_obj <= cfg.grasp_radius => Phase::Grasp,
            Phase::Grasp if s.grasped => Phase::Transport,
            Phase::Transport if s.grasped && d_base_goal <= cfg.place_standoff => Phase::Place,
            p => p,
        };

        if self.was_grasped
            && !s.grasped
            && s.goal_region.contains(s.object_pose.0, s.object_pose.1)
            && !self.collided
        {
            self.success = true;
            self.terminal = true;
        }
        self.steps += 1;
        if self.steps >= cfg.max_steps {
            self.terminal = true;
        }

        Ok(StepInfo {
            phase: self.state.phase,
            success: self.success,
            collided: self.collided,
            clamped,
            terminal: self.terminal,
        })
    }
}
