use super::render::{agent_covers, render_exo_u8, rotate};
use super::scene::{agent_radius, Pose, SceneState};
use crate::tensor::Array;

/// Ground-truth backward flow and binary occlusion at pixel resolution
/// for the exo view.
#[derive(Clone, Debug)]
pub struct FlowFieldPx {
    /// [2,S,S] normalized backward flow (x channel then y channel).
    pub flow: Array<f32>,
    /// [1,S,S] occlusion: 1 where the backward warp of frame i
    /// reconstructs frame j, 0 where it cannot.
    pub occ: Array<f32>,
}

/// Backward flow from frame j to frame i: agent-sprite pixels map by
/// the rigid pose displacement (rotation about the agent center plus
/// translation), background is identity. Occlusion marks newly revealed
/// background and any sample whose bilinear support in frame i is not
/// color-constant (sub-pixel motion across a color edge cannot be
/// reconstructed by warping).
pub fn gt_backward_flow(scene: &SceneState, pose_i: &Pose, pose_j: &Pose) -> FlowFieldPx {
    let s = scene.size;
    let r_a = agent_radius(s);
    let frame_i = render_exo_u8(scene, pose_i, true);
    let pixel = |x: i64, y: i64| -> [u8; 3] {
        let i = 3 * (y as usize * s + x as usize);
        [frame_i[i], frame_i[i + 1], frame_i[i + 2]]
    };
    let mut flow = vec![0f32; 2 * s * s];
    let mut occ = vec![1f32; s * s];
    let norm_x = 2.0 / (s as f64 - 1.0);
    let norm_y = 2.0 / (s as f64 - 1.0);
    let dtheta = pose_i.theta - pose_j.theta;
    for y in 0..s {
        for x in 0..s {
            let idx = y * s + x;
            let (px, py) = (x as f64, y as f64);
            if agent_covers(pose_j, r_a, px, py) {
                let (qx, qy) = (px - pose_j.x, py - pose_j.y);
                let (rx, ry) = rotate(qx, qy, dtheta);
                let (sx, sy) = (pose_i.x + rx, pose_i.y + ry);
                flow[idx] = ((sx - px) * norm_x) as f32;
                flow[s * s + idx] = ((sy - py) * norm_y) as f32;
                if sx < 0.0 || sy < 0.0 || sx > (s - 1) as f64 || sy > (s - 1) as f64 {
                    occ[idx] = 0.0;
                    continue;
                }
                let integer_sample =
                    (sx - sx.round()).abs() < 1e-9 && (sy - sy.round()).abs() < 1e-9;
                if integer_sample {
                    continue;
                }
                // non-integer sample: reliable only when the whole 3x3
                // neighborhood around the sample shares one color
                let cx = sx.round() as i64;
                let cy = sy.round() as i64;
                let reference = pixel(cx.clamp(0, s as i64 - 1), cy.clamp(0, s as i64 - 1));
                let mut constant = true;
                'outer: for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let nx = (cx + dx).clamp(0, s as i64 - 1);
                        let ny = (cy + dy).clamp(0, s as i64 - 1);
                        if pixel(nx, ny) != reference {
                            constant = false;
                            break 'outer;
                        }
                    }
                }
                if !constant {
                    occ[idx] = 0.0;
                }
            } else {
                // background: identity flow; newly revealed where the
                // agent stood in frame i
                if agent_covers(pose_i, r_a, px, py) {
                    occ[idx] = 0.0;
                }
            }
        }
    }
    FlowFieldPx {
        flow: Array::from_vec(vec![2, s, s], flow),
        occ: Array::from_vec(vec![1, s, s], occ),
    }
}

/// Average-pool a pixel-resolution normalized flow field down to the
/// latent grid, rescaling values from pixel-grid normalized units
/// (2/(S-1) per pixel) to latent-grid units (2/(h-1) per latent cell).
pub fn downsample_flow(flow: &Array<f32>, factor: usize) -> Array<f32> {
    let s = flow.shape[1];
    let h = s / factor;
    let rescale = ((s as f64 - 1.0) / (factor as f64 * (h as f64 - 1.0))) as f32;
    let mut out = vec![0f32; 2 * h * h];
    for ch in 0..2 {
        for oy in 0..h {
            for ox in 0..h {
                let mut acc = 0f32;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += flow.chw(ch, oy * factor + dy, ox * factor + dx);
                    }
                }
                out[(ch * h + oy) * h + ox] = acc / (factor * factor) as f32 * rescale;
            }
        }
    }
    Array::from_vec(vec![2, h, h], out)
}

/// Average-pool an occlusion map down to the latent grid.
pub fn downsample_occ(occ: &Array<f32>, factor: usize) -> Array<f32> {
    let s = occ.shape[1];
    let h = s / factor;
    let mut out = vec![0f32; h * h];
    for oy in 0..h {
        for ox in 0..h {
            let mut acc = 0f32;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += occ.chw(0, oy * factor + dy, ox * factor + dx);
                }
            }
            out[oy * h + ox] = acc / (factor * factor) as f32;
        }
    }
    Array::from_vec(vec![1, h, h], out)
}
