use rand::Rng;

use crate::error::{invalid, Result};
use crate::flow::{FlowField, OcclusionMask};
use crate::image::Image;

/// One plane wave of a procedural texture.
#[derive(Clone, Debug, PartialEq)]
pub struct Wave {
    pub kx: f64,
    pub ky: f64,
    pub phase: f64,
    pub amplitude: [f64; 3],
}

/// Smooth procedural RGB texture defined on the whole plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub base: [f64; 3],
    pub waves: Vec<Wave>,
}

impl Texture {
    /// Frequencies stay below 0.5 rad/px and amplitudes sum to at most 0.3,
    /// which bounds the bilinear interpolation error below 1e-2.
    pub fn random(rng: &mut impl Rng) -> Self {
        let base = [
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
        ];
        let waves = (0..3)
            .map(|_| {
                let freq: f64 = rng.random_range(0.15..0.5);
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                Wave {
                    kx: freq * angle.cos(),
                    ky: freq * angle.sin(),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    amplitude: [
                        rng.random_range(0.06..0.2),
                        rng.random_range(0.06..0.2),
                        rng.random_range(0.06..0.2),
                    ],
                }
            })
            .collect();
        Self { base, waves }
    }

    pub fn flat(rgb: [f64; 3]) -> Self {
        Self {
            base: rgb,
            waves: Vec::new(),
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> [f32; 3] {
        let mut v = self.base;
        for w in &self.waves {
            let s = (w.kx * x + w.ky * y + w.phase).sin();
            for (c, a) in v.iter_mut().zip(w.amplitude) {
                *c += a * s;
            }
        }
        v.map(|c| c.clamp(0.0, 1.0) as f32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Axis-aligned rectangle anchored at its top-left corner.
    Rect { width: f64, height: f64 },
    /// Disc anchored at its centre.
    Disc { radius: f64 },
}

impl Shape {
    fn contains(&self, lx: f64, ly: f64) -> bool {
        match *self {
            Shape::Rect { width, height } => lx >= 0.0 && lx < width && ly >= 0.0 && ly < height,
            Shape::Disc { radius } => lx * lx + ly * ly < radius * radius,
        }
    }
}

/// A textured shape translating at constant velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub shape: Shape,
    pub texture: Texture,
    /// Anchor position at frame 0.
    pub origin: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
}

impl Sprite {
    fn position(&self, t: f64) -> (f64, f64) {
        (
            self.origin.0 + t * self.velocity.0,
            self.origin.1 + t * self.velocity.1,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Inclusive range of sprite counts.
    pub sprites: (usize, usize),
    /// Maximum per-axis sprite speed in px/frame.
    pub max_speed: u32,
    /// Maximum per-axis background speed in px/frame.
    pub background_speed: u32,
    /// Draw real-valued positions and velocities instead of integers.
    pub subpixel: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 4,
            sprites: (2, 4),
            max_speed: 3,
            background_speed: 1,
            subpixel: false,
        }
    }
}

/// Background layer plus sprites; later sprites are drawn on top.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub background: Texture,
    pub background_velocity: (f64, f64),
    pub sprites: Vec<Sprite>,
}

/// Rendered frames with ground truth between consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Image>,
    /// `flows[t]` maps frame `t` to frame `t + 1`.
    pub flows: Vec<FlowField>,
    pub occlusions: Vec<OcclusionMask>,
}

impl SyntheticScene {
    pub fn random(cfg: &SceneConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.frames < 3 {
            return Err(invalid(format!("scene needs >= 3 frames, got {}", cfg.frames)));
        }
        if cfg.width < 8 || cfg.height < 8 || cfg.sprites.0 > cfg.sprites.1 {
            return Err(invalid("scene extent below 8x8 or empty sprite range"));
        }
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let speed = |rng: &mut dyn rand::RngCore, max: u32| -> f64 {
            if max == 0 {
                0.0
            } else if cfg.subpixel {
                rng.random_range(-(max as f64)..=max as f64)
            } else {
                rng.random_range(-(max as i64)..=max as i64) as f64
            }
        };
        let coord = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| -> f64 {
            let v = rng.random_range(lo..hi);
            if cfg.subpixel {
                v
            } else {
                v.floor()
            }
        };
        let background_velocity = (
            speed(rng, cfg.background_speed),
            speed(rng, cfg.background_speed),
        );
        let n = rng.random_range(cfg.sprites.0..=cfg.sprites.1);
        let lo = (w.min(h) / 6.0).max(3.0);
        let hi = (w.min(h) / 2.5).max(lo + 1.0);
        let mut sprites = Vec::with_capacity(n);
        for _ in 0..n {
            let shape = if rng.random_bool(0.5) {
                Shape::Rect {
                    width: rng.random_range(lo..hi).round(),
                    height: rng.random_range(lo..hi).round(),
                }
            } else {
                Shape::Disc {
                    radius: (rng.random_range(lo..hi) / 2.0).round(),
                }
            };
            let origin = (coord(rng, 0.0, w - lo), coord(rng, 0.0, h - lo));
            let velocity = (speed(rng, cfg.max_speed), speed(rng, cfg.max_speed));
            sprites.push(Sprite {
                shape,
                texture: Texture::random(rng),
                origin,
                velocity,
            });
        }
        Ok(Self {
            width: cfg.width,
            height: cfg.height,
            frames: cfg.frames,
            background: Texture::random(rng),
            background_velocity,
            sprites,
        })
    }

    /// Index of the visible surface at continuous position `(x, y)` in
    /// frame `t`: `0` is the background, `i + 1` is sprite `i`.
    pub fn layer_at(&self, x: f64, y: f64, t: f64) -> usize {
        for (i, s) in self.sprites.iter().enumerate().rev() {
            let (px, py) = s.position(t);
            if s.shape.contains(x - px, y - py) {
                return i + 1;
            }
        }
        0
    }

    fn layer_velocity(&self, layer: usize) -> (f64, f64) {
        if layer == 0 {
            self.background_velocity
        } else {
            self.sprites[layer - 1].velocity
        }
    }

    fn layer_colour(&self, layer: usize, x: f64, y: f64, t: f64) -> [f32; 3] {
        let (vx, vy) = self.background_velocity;
        if layer == 0 {
            self.background.eval(x - t * vx, y - t * vy)
        } else {
            let s = &self.sprites[layer - 1];
            let (px, py) = s.position(t);
            s.texture.eval(x - px, y - py)
        }
    }

    /// Layer index of every pixel of frame `t` (sampled at integer pixel
    /// positions).
    pub fn layers(&self, t: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.layer_at(x as f64, y as f64, t as f64));
            }
        }
        out
    }

    pub fn render_frame(&self, t: usize) -> Image {
        let (w, h) = (self.width, self.height);
        let mut img = Image::zeros(w, h, 3).expect("scene extent is positive");
        for y in 0..h {
            for x in 0..w {
                let (fx, fy, ft) = (x as f64, y as f64, t as f64);
                let rgb = self.layer_colour(self.layer_at(fx, fy, ft), fx, fy, ft);
                for (c, v) in rgb.into_iter().enumerate() {
                    img.set(c, x, y, v);
                }
            }
        }
        img
    }

    /// Exact flow from frame `t` to frame `t + k` and its occlusion mask.
    ///
    /// A pixel is occluded when its target leaves the image, when the
    /// surface it shows is hidden at the target in frame `t + k`, or when
    /// the pixel itself shows a different surface in frame `t + k`.
    pub fn ground_truth(&self, t: usize, k: usize) -> Result<(FlowField, OcclusionMask)> {
        if k == 0 || t + k >= self.frames {
            return Err(invalid(format!(
                "gap {k} from frame {t} exceeds {} frames",
                self.frames
            )));
        }
        let (w, h) = (self.width, self.height);
        let (t0, t1) = (t as f64, (t + k) as f64);
        let mut flow = FlowField::zeros(w, h);
        let mut visible = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64, y as f64);
                let layer = self.layer_at(fx, fy, t0);
                let (vx, vy) = self.layer_velocity(layer);
                let (u, v) = (k as f64 * vx, k as f64 * vy);
                flow.set(x, y, u as f32, v as f32);
                let (qx, qy) = (fx + u, fy + v);
                let inside = qx >= 0.0 && qy >= 0.0 && qx <= (w - 1) as f64 && qy <= (h - 1) as f64;
                let ok = inside
                    && self.layer_at(qx.round(), qy.round(), t1) == layer
                    && self.layer_at(fx, fy, t1) == layer;
                visible.push(ok);
            }
        }
        Ok((flow, OcclusionMask::from_visibility(w, h, &visible)?))
    }

    pub fn render(&self) -> Result<Sequence> {
        let frames = (0..self.frames).map(|t| self.render_frame(t)).collect();
        let mut flows = Vec::with_capacity(self.frames - 1);
        let mut occlusions = Vec::with_capacity(self.frames - 1);
        for t in 0..self.frames - 1 {
            let (f, o) = self.ground_truth(t, 1)?;
            flows.push(f);
            occlusions.push(o);
        }
        Ok(Sequence {
            frames,
            flows,
            occlusions,
        })
    }
}

pub fn render_scene(scene: &SyntheticScene) -> Result<Sequence> {
    scene.render()
}

/// `f13(p) = f12(p) + f23(p + f12(p))`, with `f23` looked up bilinearly
/// (clamped at the border).
pub fn compose_flow(f12: &FlowField, f23: &FlowField) -> Result<FlowField> {
    if f12.extent() != f23.extent() {
        return Err(invalid(format!(
            "cannot compose flows of extent {:?} and {:?}",
            f12.extent(),
            f23.extent()
        )));
    }
    let mut out = FlowField::zeros(f12.width(), f12.height());
    for y in 0..f12.height() {
        for x in 0..f12.width() {
            let (u, v) = f12.get(x, y);
            let (u2, v2) = f23.sample(x as f64 + u as f64, y as f64 + v as f64);
            out.set(x, y, (u as f64 + u2) as f32, (v as f64 + v2) as f32);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_sprite(velocity: (f64, f64)) -> SyntheticScene {
        SyntheticScene {
            width: 24,
            height: 16,
            frames: 3,
            background: Texture::flat([0.2, 0.2, 0.2]),
            background_velocity: (0.0, 0.0),
            sprites: vec![Sprite {
                shape: Shape::Rect {
                    width: 6.0,
                    height: 5.0,
                },
                texture: Texture::flat([0.9, 0.5, 0.1]),
                origin: (4.0, 5.0),
                velocity,
            }],
        }
    }

    #[test]
    fn static_scene_has_zero_flow_and_full_visibility() {
        let s = one_sprite((0.0, 0.0));
        let seq = s.render().unwrap();
        assert!(seq.flows.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
        assert!(seq.occlusions.iter().all(|m| m.occluded_fraction() == 0.0));
        assert_eq!(seq.frames[0], seq.frames[2]);
    }

    #[test]
    fn moving_sprite_flow_and_leading_edge() {
        let s = one_sprite((2.0, 0.0));
        let (f, m) = s.ground_truth(0, 1).unwrap();
        for y in 0..16 {
            for x in 0..24 {
                let on = (4..10).contains(&x) && (5..10).contains(&y);
                assert_eq!(f.get(x, y), if on { (2.0, 0.0) } else { (0.0, 0.0) });
                // covered ahead of the sprite: footprint(t+1) \ footprint(t)
                if (10..12).contains(&x) && (5..10).contains(&y) {
                    assert!(!m.is_visible(x, y));
                }
            }
        }
        assert_eq!(
            m.values().iter().filter(|&&v| v == 0.0).count(),
            2 * 2 * 5,
            "leading and trailing bands"
        );
    }

    #[test]
    fn warp_identity_on_visible_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let scene = SyntheticScene::random(&SceneConfig::default(), &mut rng).unwrap();
            let seq = scene.render().unwrap();
            for t in 0..seq.flows.len() {
                let (f, m) = (&seq.flows[t], &seq.occlusions[t]);
                for y in 0..64 {
                    for x in 0..64 {
                        if !m.is_visible(x, y) {
                            continue;
                        }
                        let (u, v) = f.get(x, y);
                        let (qx, qy) = ((x as f32 + u) as usize, (y as f32 + v) as usize);
                        for c in 0..3 {
                            assert_eq!(seq.frames[t + 1].get(c, qx, qy), seq.frames[t].get(c, x, y));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn compose_examples() {
        let f = FlowField::from_fn(5, 4, |x, y| (x as f32 * 0.25, -(y as f32) * 0.5));
        assert_eq!(compose_flow(&f, &FlowField::zeros(5, 4)).unwrap(), f);
        let a = FlowField::constant(6, 6, 1.0, 0.0);
        let b = FlowField::constant(6, 6, 0.0, 2.0);
        assert_eq!(compose_flow(&a, &b).unwrap(), FlowField::constant(6, 6, 1.0, 2.0));
    }

    #[test]
    fn short_scenes_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SceneConfig {
            frames: 2,
            ..SceneConfig::default()
        };
        assert!(SyntheticScene::random(&cfg, &mut rng).is_err());
    }
}
