//! Scripted phase-conditioned expert: proportional base controller toward
//! the active waypoint, closed-form 2-link IK for the arm, simple gripper
//! schedule. All outputs clamped to [-1, 1].

use crate::world::{wrap_angle, Action, Phase, SimConfig, World, WorldState};

#[derive(Clone, Copy, Debug)]
pub struct ExpertAction {
    pub action: Action,
    /// set when the IK target was unreachable and a recovery move is issued
    pub retreat: bool,
}

/// Elbow-up closed-form IK in the base frame; returns None when the target
/// radius is outside the annulus the arm can reach.
fn ik(cfg: &SimConfig, target_body: (f64, f64)) -> Option<[f64; 2]> {
    let (tx, ty) = target_body;
    let r = (tx * tx + ty * ty).sqrt();
    let (l1, l2) = (cfg.l1, cfg.l2);
    if r > l1 + l2 - 0.005 || r < (l1 - l2).abs() + 0.005 {
        return None;
    }
    let c2 = ((r * r - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let q2 = c2.acos();
    let q1 = ty.atan2(tx) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
    Some([wrap_angle(q1), wrap_angle(q2)])
}

fn to_body(s: &WorldState, p: (f64, f64)) -> (f64, f64) {
    let (x, y, th) = s.base_pose;
    let (dx, dy) = (p.0 - x, p.1 - y);
    (dx * th.cos() + dy * th.sin(), -dx * th.sin() + dy * th.cos())
}

/// Proportional drive toward a world point: rotate in place when badly
/// misaligned, otherwise blend forward speed with heading correction.
fn drive_to(s: &WorldState, target: (f64, f64), stop_dist: f64) -> [f64; 2] {
    let (x, y, th) = s.base_pose;
    let (dx, dy) = (target.0 - x, target.1 - y);
    let dist = (dx * dx + dy * dy).sqrt();
    let heading_err = wrap_angle(dy.atan2(dx) - th);
    let w = (2.0 * heading_err).clamp(-1.0, 1.0);
    if heading_err.abs() > 0.4 {
        return [0.0, w];
    }
    let v = (3.0 * (dist - stop_dist)).clamp(-0.2, 1.0) * heading_err.cos().max(0.0);
    [v, w]
}

/// Move joints toward IK targets; None means unreachable (retreat). Joint
/// space is the clamped interval [-π, π], not a circle, so the error is
/// deliberately unwrapped — taking the "short way" through ±π would pin the
/// joint against its limit.
fn arm_to(cfg: &SimConfig, s: &WorldState, target_world: (f64, f64), grip: f64) -> Option<[f64; 3]> {
    let q = ik(cfg, to_body(s, target_world))?;
    let d1 = (4.0 * (q[0] - s.arm_angles[0])).clamp(-1.0, 1.0);
    let d2 = (4.0 * (q[1] - s.arm_angles[1])).clamp(-1.0, 1.0);
    Some([d1, d2, grip])
}

pub fn expert_action(cfg: &SimConfig, s: &WorldState) -> ExpertAction {
    let ee = World::ee_pose(cfg, s);
    let goal_c = (s.goal_region.cx, s.goal_region.cy);
    let d_ee_goal = ((ee.0 - goal_c.0).powi(2) + (ee.1 - goal_c.1).powi(2)).sqrt();
    let object_placed = !s.grasped && s.goal_region.contains(s.object_pose.0, s.object_pose.1);

    let (base, arm, retreat) = match s.phase {
        Phase::Navigate => {
            (drive_to(s, s.object_pose, cfg.reach_standoff - 0.10), [0.0, 0.0, 0.0], false)
        }
        Phase::Reach => match arm_to(cfg, s, s.object_pose, -1.0) {
            Some(a) => ([0.0, 0.0], a, false),
            None => (recover(s, cfg), [0.0, 0.0, 0.0], true),
        },
        Phase::Grasp => match arm_to(cfg, s, s.object_pose, 1.0) {
            Some(a) => ([0.0, 0.0], a, false),
            None => (recover(s, cfg), [0.0, 0.0, 0.0], true),
        },
        Phase::Transport => {
            (drive_to(s, goal_c, cfg.place_standoff - 0.10), [0.0, 0.0, 1.0], false)
        }
        Phase::Place => {
            if object_placed {
                ([0.0, 0.0], [0.0, 0.0, 0.0], false)
            } else {
                let grip = if d_ee_goal <= 0.06 { -1.0 } else { 1.0 };
                match arm_to(cfg, s, goal_c, grip) {
                    Some(a) => ([0.0, 0.0], a, false),
                    None => (recover(s, cfg), [0.0, 0.0, 1.0], true),
                }
            }
        }
    };
    ExpertAction { action: Action { base, arm }, retreat }
}

/// Recovery when IK fails: nudge the base toward (or away from) the active
/// target so the radius re-enters the reachable annulus.
fn recover(s: &WorldState, cfg: &SimConfig) -> [f64; 2] {
    let target = if s.phase == Phase::Place {
        (s.goal_region.cx, s.goal_region.cy)
    } else {
        s.object_pose
    };
    let (x, y, _) = s.base_pose;
    let dist = ((target.0 - x).powi(2) + (target.1 - y).powi(2)).sqrt();
    let mid = (cfg.l1 + cfg.l2) * 0.7;
    if dist > mid {
        drive_to(s, target, mid)
    } else {
        [-0.5, 0.0]
    }
}
