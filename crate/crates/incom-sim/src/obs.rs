//! Observation synthesis: egocentric point set (boundary + floor samples,
//! farthest-point subsampled to K_pts), two egocentric raster views, and
//! the proprioceptive vector. Deterministic functions of world state.

use crate::world::{
    Rect, SimConfig, World, WorldState, IMG_CHANNELS, N_VIEWS, POINT_DIM, PROPRIO_DIM,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// K_pts × POINT_DIM, body frame: (x, y, obstacle, object, floor)
    pub points: Vec<f32>,
    /// N_VIEWS × IMG_CHANNELS × H × W in [0,1]; ch0 obstacles/walls,
    /// ch1 object, ch2 goal region
    pub images: Vec<f32>,
    /// (x, y, θ, q1, q2, gripper, ee_x, ee_y)
    pub proprio: Vec<f32>,
}

const CLASS_OBSTACLE: usize = 0;
const CLASS_OBJECT: usize = 1;
const CLASS_FLOOR: usize = 2;

fn rect_perimeter_samples(r: &Rect, spacing: f64, out: &mut Vec<(f64, f64, usize)>) {
    let (x0, y0) = (r.cx - r.w / 2.0, r.cy - r.h / 2.0);
    let (x1, y1) = (r.cx + r.w / 2.0, r.cy + r.h / 2.0);
    let edges = [
        ((x0, y0), (x1, y0)),
        ((x1, y0), (x1, y1)),
        ((x1, y1), (x0, y1)),
        ((x0, y1), (x0, y0)),
    ];
    for (a, b) in edges {
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let n = (len / spacing).ceil().max(1.0) as usize;
        for i in 0..n {
            let t = i as f64 / n as f64;
            out.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), CLASS_OBSTACLE));
        }
    }
}

/// Candidate cloud in world frame, fixed construction order.
fn candidates(cfg: &SimConfig, s: &WorldState) -> Vec<(f64, f64, usize)> {
    let mut out = Vec::new();
    // coarse floor grid
    let n = 12;
    for i in 0..n {
        for j in 0..n {
            let x = (i as f64 + 0.5) * cfg.world_w / n as f64;
            let y = (j as f64 + 0.5) * cfg.world_h / n as f64;
            if !s.obstacles.iter().any(|o| o.contains(x, y)) {
                out.push((x, y, CLASS_FLOOR));
            }
        }
    }
    // world walls read as obstacle boundary
    let wall = Rect {
        cx: cfg.world_w / 2.0,
        cy: cfg.world_h / 2.0,
        w: cfg.world_w,
        h: cfg.world_h,
    };
    rect_perimeter_samples(&wall, 0.25, &mut out);
    for ob in &s.obstacles {
        rect_perimeter_samples(ob, 0.12, &mut out);
    }
    // object boundary ring
    for i in 0..8 {
        let a = i as f64 / 8.0 * std::f64::consts::TAU;
        out.push((
            s.object_pose.0 + 0.04 * a.cos(),
            s.object_pose.1 + 0.04 * a.sin(),
            CLASS_OBJECT,
        ));
    }
    out
}

/// Deterministic farthest-point sampling: start at index 0, always take the
/// candidate maximizing min-distance to the chosen set (lowest index wins
/// ties). Returns indices in selection order.
pub fn fps_indices(pts: &[(f64, f64)], k: usize) -> Vec<usize> {
    assert!(!pts.is_empty());
    let k = k.min(pts.len());
    let mut chosen = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; pts.len()];
    chosen.push(0usize);
    for _ in 1..k {
        let last = *chosen.last().unwrap();
        let (lx, ly) = pts[last];
        let mut best = 0usize;
        let mut best_d = -1.0;
        for (i, &(x, y)) in pts.iter().enumerate() {
            let d = (x - lx).powi(2) + (y - ly).powi(2);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        min_d[best] = 0.0;
        chosen.push(best);
    }
    chosen
}

fn render_view(
    cfg: &SimConfig,
    s: &WorldState,
    center_body: (f64, f64),
    span: f64,
    img: &mut [f32],
) {
    let (h, w) = (cfg.h_img, cfg.w_img);
    let px = span / w as f64;
    let (bx, by, th) = s.base_pose;
    let (ct, st) = (th.cos(), th.sin());
    let plane = h * w;
    for r in 0..h {
        for c in 0..w {
            // body-frame pixel center: +x forward along columns
            let xb = center_body.0 - span / 2.0 + (c as f64 + 0.5) * px;
            let yb = center_body.1 - span / 2.0 + (r as f64 + 0.5) * px;
            let x = bx + xb * ct - yb * st;
            let y = by + xb * st + yb * ct;
            let idx = r * w + c;
            let outside =
                x < 0.0 || y < 0.0 || x > cfg.world_w || y > cfg.world_h;
            if outside || s.obstacles.iter().any(|o| o.contains(x, y)) {
                img[idx] = 1.0;
            }
            let d_obj =
                ((x - s.object_pose.0).powi(2) + (y - s.object_pose.1).powi(2)).sqrt();
            if d_obj <= 0.08 {
                img[plane + idx] = 1.0;
            }
            if s.goal_region.contains(x, y) {
                img[2 * plane + idx] = 1.0;
            }
        }
    }
}

pub fn observe(cfg: &SimConfig, s: &WorldState) -> Observation {
    // points: FPS over the candidate cloud, then egocentric conversion
    let cand = candidates(cfg, s);
    let coords: Vec<(f64, f64)> = cand.iter().map(|&(x, y, _)| (x, y)).collect();
    let idx = fps_indices(&coords, cfg.k_pts);
    let (bx, by, th) = s.base_pose;
    let (ct, st) = (th.cos(), th.sin());
    let mut points = vec![0f32; cfg.k_pts * POINT_DIM];
    for (row, &i) in idx.iter().enumerate() {
        let (x, y, class) = cand[i];
        let (dx, dy) = (x - bx, y - by);
        points[row * POINT_DIM] = (dx * ct + dy * st) as f32;
        points[row * POINT_DIM + 1] = (-dx * st + dy * ct) as f32;
        points[row * POINT_DIM + 2 + class] = 1.0;
    }
    // pad by repeating the last point if the cloud was ever smaller than K
    for row in idx.len()..cfg.k_pts {
        let src = (idx.len() - 1) * POINT_DIM;
        for d in 0..POINT_DIM {
            points[row * POINT_DIM + d] = points[src + d];
        }
    }

    let plane = cfg.h_img * cfg.w_img;
    let mut images = vec![0f32; N_VIEWS * IMG_CHANNELS * plane];
    // forward view: 4.8 m span biased ahead of the base
    render_view(cfg, s, (1.6, 0.0), 4.8, &mut images[..IMG_CHANNELS * plane]);
    // wrist view: 1.6 m span centered on the end effector
    let ee = World::ee_pose(cfg, s);
    let (dx, dy) = (ee.0 - bx, ee.1 - by);
    let ee_body = (dx * ct + dy * st, -dx * st + dy * ct);
    render_view(cfg, s, ee_body, 1.6, &mut images[IMG_CHANNELS * plane..]);

    let proprio: Vec<f32> = vec![
        s.base_pose.0 as f32,
        s.base_pose.1 as f32,
        s.base_pose.2 as f32,
        s.arm_angles[0] as f32,
        s.arm_angles[1] as f32,
        s.gripper as f32,
        ee.0 as f32,
        ee.1 as f32,
    ];
    debug_assert_eq!(proprio.len(), PROPRIO_DIM);
    Observation { points, images, proprio }
}
