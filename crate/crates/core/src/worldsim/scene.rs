use crate::tensor::Rng;

/// Verbs, colors, and shapes of the fixed description grammar
/// "<verb> <color> <shape>".
pub const VERBS: [&str; 3] = ["approach", "retreat", "circle"];

pub const COLORS: [(&str, [u8; 3]); 10] = [
    ("red", [200, 44, 44]),
    ("green", [52, 176, 64]),
    ("blue", [52, 92, 208]),
    ("yellow", [216, 200, 52]),
    ("purple", [148, 60, 196]),
    ("cyan", [60, 196, 196]),
    ("pink", [228, 120, 168]),
    ("brown", [140, 92, 44]),
    ("olive", [128, 140, 44]),
    ("navy", [32, 44, 116]),
];

pub const SHAPES: [&str; 4] = ["box", "disc", "tri", "ring"];

pub const FLOOR: [u8; 3] = [42, 42, 48];
pub const AGENT_BODY: [u8; 3] = [235, 235, 235];
pub const AGENT_FRONT: [u8; 3] = [250, 140, 30];

/// Agent disc radius in pixels for a room of extent `s`.
pub fn agent_radius(s: usize) -> f64 {
    s as f64 / 8.0
}

/// Per-frame agent pose: position in pixels, heading in radians.
/// Heading 0 faces "up" (decreasing y); the facing unit vector is
/// (sin th, -cos th).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn facing(&self) -> (f64, f64) {
        (self.theta.sin(), -self.theta.cos())
    }
}

/// Heading that faces along (dx, dy).
pub fn heading_toward(dx: f64, dy: f64) -> f64 {
    dx.atan2(-dy)
}

#[derive(Clone, Debug)]
pub struct ObjectSpec {
    pub color: usize,
    pub shape: usize,
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
}

impl ObjectSpec {
    pub fn covers(&self, px: f64, py: f64) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        match SHAPES[self.shape] {
            "box" => dx.abs() <= self.half_w && dy.abs() <= self.half_h,
            "disc" => {
                let u = dx / self.half_w;
                let v = dy / self.half_h;
                u * u + v * v <= 1.0
            }
            "tri" => {
                dy.abs() <= self.half_h
                    && dx.abs() <= self.half_w * (dy + self.half_h) / (2.0 * self.half_h)
            }
            "ring" => {
                let u = dx / self.half_w;
                let v = dy / self.half_h;
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            _ => unreachable!(),
        }
    }

    pub fn radius(&self) -> f64 {
        self.half_w.max(self.half_h)
    }
}

/// Static room contents. The agent trajectory lives in the clip.
#[derive(Clone, Debug)]
pub struct SceneState {
    pub size: usize,
    pub objects: Vec<ObjectSpec>,
}

impl SceneState {
    /// Index of the topmost object covering the point, honoring draw
    /// order (later objects paint over earlier ones).
    pub fn object_at(&self, px: f64, py: f64) -> Option<usize> {
        self.objects.iter().rposition(|o| o.covers(px, py))
    }
}

fn aabb_overlap(a: &ObjectSpec, b: &ObjectSpec, gap: f64) -> bool {
    (a.cx - b.cx).abs() < a.half_w + b.half_w + gap
        && (a.cy - b.cy).abs() < a.half_h + b.half_h + gap
}

/// Deterministic scene layout from a layout seed: 1..=6 objects with
/// distinct (color, shape) pairs and non-overlapping extents.
pub fn generate_scene(size: usize, layout_seed: u64) -> SceneState {
    let mut rng = Rng::derive(layout_seed, "scene");
    let s = size as f64;
    let margin = s / 16.0;
    let k = 1 + rng.below(6);
    let mut combos: Vec<(usize, usize)> = (0..COLORS.len())
        .flat_map(|c| (0..SHAPES.len()).map(move |sh| (c, sh)))
        .collect();
    rng.shuffle(&mut combos);
    let mut objects: Vec<ObjectSpec> = Vec::new();
    for (n, &(color, shape)) in combos.iter().take(k).enumerate() {
        for _attempt in 0..40 {
            // the first object anchors the scene near the center so
            // orbiting actions always have room
            let (half_w, half_h, cx, cy) = if n == 0 {
                let hw = rng.uniform_in(s / 11.0, s / 8.0);
                let hh = rng.uniform_in(s / 11.0, s / 8.0);
                (hw, hh, rng.uniform_in(0.375 * s, 0.625 * s), rng.uniform_in(0.375 * s, 0.625 * s))
            } else {
                let hw = rng.uniform_in(s / 11.0, s / 6.5);
                let hh = rng.uniform_in(s / 11.0, s / 6.5);
                (
                    hw,
                    hh,
                    rng.uniform_in(margin + hw, s - 1.0 - margin - hw),
                    rng.uniform_in(margin + hh, s - 1.0 - margin - hh),
                )
            };
            let candidate = ObjectSpec { color, shape, cx, cy, half_w, half_h };
            if objects.iter().all(|o| !aabb_overlap(o, &candidate, 2.0)) {
                objects.push(candidate);
                break;
            }
        }
    }
    assert!(!objects.is_empty(), "scene generation placed no objects");
    SceneState { size, objects }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_deterministic_and_in_bounds() {
        let a = generate_scene(64, 1234);
        let b = generate_scene(64, 1234);
        assert_eq!(a.objects.len(), b.objects.len());
        for (oa, ob) in a.objects.iter().zip(b.objects.iter()) {
            assert_eq!(oa.cx, ob.cx);
            assert_eq!(oa.cy, ob.cy);
        }
        for o in &a.objects {
            assert!(o.cx - o.half_w >= 0.0 && o.cx + o.half_w <= 63.0);
            assert!(o.cy - o.half_h >= 0.0 && o.cy + o.half_h <= 63.0);
        }
        assert!((1..=6).contains(&a.objects.len()));
    }

    #[test]
    fn objects_do_not_overlap_at_spawn() {
        for seed in 0..20 {
            let scene = generate_scene(64, seed);
            for i in 0..scene.objects.len() {
                for j in 0..i {
                    assert!(
                        !aabb_overlap(&scene.objects[i], &scene.objects[j], 0.0),
                        "seed {seed}: objects {i} and {j} overlap"
                    );
                }
            }
        }
    }

    #[test]
    fn color_shape_pairs_are_unique_within_scene() {
        for seed in 0..20 {
            let scene = generate_scene(64, seed);
            let mut seen = std::collections::BTreeSet::new();
            for o in &scene.objects {
                assert!(seen.insert((o.color, o.shape)), "duplicate combo in seed {seed}");
            }
        }
    }

    #[test]
    fn heading_convention() {
        // facing up at theta=0
        let p = Pose { x: 0.0, y: 0.0, theta: 0.0 };
        let (fx, fy) = p.facing();
        assert!((fx - 0.0).abs() < 1e-12 && (fy + 1.0).abs() < 1e-12);
        // heading_toward round-trips
        let th = heading_toward(1.0, 0.0);
        let p = Pose { x: 0.0, y: 0.0, theta: th };
        let (fx, fy) = p.facing();
        assert!((fx - 1.0).abs() < 1e-12 && fy.abs() < 1e-12);
    }
}
