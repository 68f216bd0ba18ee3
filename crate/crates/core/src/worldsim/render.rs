use super::scene::{
    agent_radius, ObjectSpec, Pose, SceneState, AGENT_BODY, AGENT_FRONT, COLORS, FLOOR,
};
use crate::tensor::Array;

/// R(theta) * (dx, dy)
#[inline]
pub(crate) fn rotate(dx: f64, dy: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (dx * c - dy * s, dx * s + dy * c)
}

#[inline]
pub(crate) fn agent_covers(pose: &Pose, r_a: f64, px: f64, py: f64) -> bool {
    let dx = px - pose.x;
    let dy = py - pose.y;
    dx * dx + dy * dy <= r_a * r_a
}

fn object_color(o: &ObjectSpec) -> [u8; 3] {
    COLORS[o.color].1
}

/// Color of the static scene (floor + objects) at a raster point.
pub(crate) fn scene_color(scene: &SceneState, px: f64, py: f64) -> [u8; 3] {
    match scene.object_at(px, py) {
        Some(i) => object_color(&scene.objects[i]),
        None => FLOOR,
    }
}

/// Color of the full frame at a raster point, painter's order: floor,
/// objects, agent disc, heading marker (front half-disc).
pub(crate) fn frame_color(
    scene: &SceneState,
    pose: &Pose,
    draw_heading: bool,
    px: f64,
    py: f64,
) -> [u8; 3] {
    let r_a = agent_radius(scene.size);
    if agent_covers(pose, r_a, px, py) {
        if draw_heading {
            let qx = px - pose.x;
            let qy = py - pose.y;
            // local frame: forward is -y
            let local_y = -qx * pose.theta.sin() + qy * pose.theta.cos();
            if local_y < 0.0 {
                return AGENT_FRONT;
            }
        }
        return AGENT_BODY;
    }
    scene_color(scene, px, py)
}

/// Rasterize interleaved RGB rows, sampling at integer lattice points.
fn raster(scene: &SceneState, pose: Option<&Pose>, draw_heading: bool) -> Vec<u8> {
    let s = scene.size;
    let mut out = vec![0u8; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let c = match pose {
                Some(p) => frame_color(scene, p, draw_heading, x as f64, y as f64),
                None => scene_color(scene, x as f64, y as f64),
            };
            let i = 3 * (y * s + x);
            out[i] = c[0];
            out[i + 1] = c[1];
            out[i + 2] = c[2];
        }
    }
    out
}

/// Interleaved RGB bytes -> [3,S,S] reals in [0,1].
pub fn u8_to_frame(raster: &[u8], s: usize) -> Array<f32> {
    let mut data = vec![0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            for ch in 0..3 {
                data[(ch * s + y) * s + x] = raster[3 * (y * s + x) + ch] as f32 / 255.0;
            }
        }
    }
    Array::from_vec(vec![3, s, s], data)
}

/// [3,S,S] reals in [0,1] -> interleaved RGB bytes.
pub fn frame_to_u8(frame: &Array<f32>) -> Vec<u8> {
    let s = frame.shape[1];
    let mut out = vec![0u8; 3 * s * frame.shape[2]];
    for y in 0..s {
        for x in 0..frame.shape[2] {
            for ch in 0..3 {
                let v = (frame.chw(ch, y, x) * 255.0).round().clamp(0.0, 255.0) as u8;
                out[3 * (y * frame.shape[2] + x) + ch] = v;
            }
        }
    }
    out
}

pub(crate) fn render_exo_u8(scene: &SceneState, pose: &Pose, draw_heading: bool) -> Vec<u8> {
    raster(scene, Some(pose), draw_heading)
}

/// Fixed overhead view.
pub fn render_exo(scene: &SceneState, pose: &Pose) -> Array<f32> {
    u8_to_frame(&render_exo_u8(scene, pose, true), scene.size)
}

/// Overhead view without the heading marker (symmetry checks).
pub fn render_exo_plain(scene: &SceneState, pose: &Pose) -> Array<f32> {
    u8_to_frame(&render_exo_u8(scene, pose, false), scene.size)
}

/// Egocentric view: the forward half-plane window of the agent,
/// bilinearly resampled from the exo rasterization. Ego pixel (r,c)
/// maps to world = pose + R(theta) * (c - (S-1)/2, r - (S-1)); points
/// outside the room render black.
pub fn render_ego(scene: &SceneState, pose: &Pose) -> Array<f32> {
    let s = scene.size;
    let exo = render_exo_u8(scene, pose, true);
    let sample = |wx: f64, wy: f64, ch: usize| -> f64 {
        if wx < 0.0 || wy < 0.0 || wx > (s - 1) as f64 || wy > (s - 1) as f64 {
            return 0.0;
        }
        let x0 = wx.floor() as usize;
        let y0 = wy.floor() as usize;
        let x1 = (x0 + 1).min(s - 1);
        let y1 = (y0 + 1).min(s - 1);
        let ax = wx - x0 as f64;
        let ay = wy - y0 as f64;
        let g = |yy: usize, xx: usize| exo[3 * (yy * s + xx) + ch] as f64;
        (1.0 - ay) * ((1.0 - ax) * g(y0, x0) + ax * g(y0, x1))
            + ay * ((1.0 - ax) * g(y1, x0) + ax * g(y1, x1))
    };
    let mut bytes = vec![0u8; 3 * s * s];
    let half = (s as f64 - 1.0) / 2.0;
    for r in 0..s {
        for c in 0..s {
            let u = c as f64 - half;
            let v = r as f64 - (s as f64 - 1.0);
            let (dx, dy) = rotate(u, v, pose.theta);
            let (wx, wy) = (pose.x + dx, pose.y + dy);
            for ch in 0..3 {
                bytes[3 * (r * s + c) + ch] = sample(wx, wy, ch).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    u8_to_frame(&bytes, s)
}
