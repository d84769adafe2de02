//! Bouncing-sprite episodes: the synthetic sequential world used for
//! pre-training pairs and for both evaluators.
//!
//! Each episode is a fixed set of sprites moving at constant speed inside a
//! square frame and reflecting off its walls. Frames are rendered with hard
//! edges, so per-pixel instance labels are exact. All colors are multiples
//! of 1/255 and survive an 8-bit PNG round trip unchanged.

mod dump;
mod pairs;
mod render;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dump::{dump_episode, load_frame, load_labels, EpisodeManifest};
pub use pairs::{augment_pair, batch_with_repeat, sample_frames, sample_pair, Augmentation, ScenePair};
pub use render::{LabelMap, Rendered};

use crate::rng::{substream, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Frame extent in pixels (frames are square).
    pub size: usize,
    pub frames: usize,
    pub sprites: usize,
    /// Sprite radius range in pixels.
    pub radius: [f64; 2],
    /// Speed range in pixels per frame.
    pub speed: [f64; 2],
    pub checker_cell: usize,
    /// Temporal gap range `[k_min, k_max]` for training pairs.
    pub gap: [usize; 2],
    /// Area fraction range of the random resized crop.
    pub crop_scale: [f64; 2],
    pub flip: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 32,
            frames: 64,
            sprites: 3,
            radius: [4.0, 7.0],
            // Slow enough that a sprite rarely leaves its footprint over the
            // gap range, so the reference frame predicts the target.
            speed: [0.1, 0.3],
            checker_cell: 3,
            gap: [2, 24],
            crop_scale: [0.5, 1.0],
            flip: true,
        }
    }
}

impl SceneConfig {
    /// Same world with every sprite at rest.
    pub fn static_scene(&self) -> Self {
        SceneConfig {
            speed: [0.0, 0.0],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Scene(m));
        if self.size == 0 || self.frames == 0 || self.checker_cell == 0 {
            return fail("size, frames and checker_cell must be positive".into());
        }
        let [rmin, rmax] = self.radius;
        if !(rmin > 0.0 && rmin <= rmax) {
            return fail(format!("radius range {:?} is empty or non-positive", self.radius));
        }
        if 2.0 * rmax >= self.size as f64 {
            return fail(format!("radius {rmax} exceeds half the extent {}", self.size));
        }
        let [smin, smax] = self.speed;
        if !(smin >= 0.0 && smin <= smax && smax.is_finite()) {
            return fail(format!("speed range {:?} is invalid", self.speed));
        }
        if !(self.gap[0] >= 1 && self.gap[0] <= self.gap[1]) {
            return fail(format!("gap range {:?} is invalid", self.gap));
        }
        let [cmin, cmax] = self.crop_scale;
        if !(cmin > 0.0 && cmin <= cmax && cmax <= 1.0) {
            return fail(format!("crop scale range {:?} must lie in (0, 1]", self.crop_scale));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        crate::digest::json_hash(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    /// Whether offset `(dx, dy)` from the centre lies inside a sprite of
    /// radius `r`. Squares and triangles are inscribed in the circle; the
    /// triangle points up.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => {
                let h = r * std::f64::consts::FRAC_1_SQRT_2;
                dx.abs() <= h && dy.abs() <= h
            }
            Shape::Triangle => {
                let c = r * 3f64.sqrt() / 2.0;
                let v = [(0.0, -r), (c, r / 2.0), (-c, r / 2.0)];
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
                let (e0, e1, e2) = (edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0]));
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }
}

/// Saturated sprite colors (channel values are multiples of 1/255).
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 30, 30],
    [30, 200, 40],
    [40, 60, 230],
    [240, 220, 20],
    [220, 40, 220],
    [20, 210, 220],
    [250, 130, 20],
    [140, 60, 230],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: Shape,
    pub color: [u8; 3],
    pub radius: f64,
    /// Centre `(x, y)` per frame.
    pub centers: Vec<[f64; 2]>,
    /// Velocity `(vx, vy)` per frame; frame `t + 1` is frame `t` advanced by
    /// this velocity and reflected at the walls.
    pub velocities: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    /// Gray levels of the two checker cells, in 1/255 units.
    pub levels: [u8; 2],
    pub offset: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub seed: u64,
    pub index: u64,
    pub config: SceneConfig,
    pub background: Background,
    /// Sprite `k` carries label `k + 1` and is drawn above sprites `0..k`.
    pub sprites: Vec<Sprite>,
}

/// One coordinate of a reflecting walk: advance by `v`, then fold back into
/// `[lo, hi]`, flipping the velocity at each wall hit.
fn bounce(mut p: f64, mut v: f64, lo: f64, hi: f64) -> (f64, f64) {
    p += v;
    loop {
        if p > hi {
            p = 2.0 * hi - p;
            v = -v;
        } else if p < lo {
            p = 2.0 * lo - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

impl Episode {
    /// Episode `index` of the family keyed by `seed`.
    pub fn generate(cfg: &SceneConfig, seed: u64, index: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(seed, Stream::Episodes, index);
        let size = cfg.size as f64;
        let base: u8 = rng.random_range(90..=150);
        let background = Background {
            levels: [base, base + 22],
            offset: [
                rng.random_range(0..cfg.checker_cell),
                rng.random_range(0..cfg.checker_cell),
            ],
        };
        // Sprite 1 keeps the first palette color so that state readouts can
        // tell it apart; the others draw distinct colors from the rest.
        let mut colors: Vec<[u8; 3]> = PALETTE.to_vec();
        colors[1..].shuffle(&mut rng);
        let shapes = [Shape::Circle, Shape::Square, Shape::Triangle];
        let mut sprites = Vec::with_capacity(cfg.sprites);
        for k in 0..cfg.sprites {
            let radius = rng.random_range(cfg.radius[0]..=cfg.radius[1]);
            let shape = shapes[rng.random_range(0..shapes.len())];
            let (lo, hi) = (radius, size - radius);
            let mut p = [rng.random_range(lo..=hi), rng.random_range(lo..=hi)];
            let speed = rng.random_range(cfg.speed[0]..=cfg.speed[1]);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let mut v = [speed * angle.cos(), speed * angle.sin()];
            let mut centers = Vec::with_capacity(cfg.frames);
            let mut velocities = Vec::with_capacity(cfg.frames);
            for _ in 0..cfg.frames {
                centers.push(p);
                velocities.push(v);
                for a in 0..2 {
                    (p[a], v[a]) = bounce(p[a], v[a], lo, hi);
                }
            }
            sprites.push(Sprite {
                shape,
                color: colors[k % colors.len()],
                radius,
                centers,
                velocities,
            });
        }
        Ok(Episode {
            seed,
            index,
            config: cfg.clone(),
            background,
            sprites,
        })
    }

    pub fn frames(&self) -> usize {
        self.config.frames
    }

    /// Per sprite `(x, y, vx, vy)` at frame `t`, concatenated.
    pub fn state(&self, t: usize) -> Result<Vec<f64>> {
        self.check_frame(t)?;
        Ok(self.state_at(t))
    }

    fn state_at(&self, t: usize) -> Vec<f64> {
        self.sprites
            .iter()
            .flat_map(|s| [s.centers[t][0], s.centers[t][1], s.velocities[t][0], s.velocities[t][1]])
            .collect()
    }

    pub fn render(&self, t: usize) -> Result<Rendered> {
        self.check_frame(t)?;
        Ok(render::render(self, t))
    }

    fn check_frame(&self, t: usize) -> Result<()> {
        if t >= self.config.frames {
            return Err(Error::Scene(format!("frame {t} outside 0..{}", self.config.frames)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounce_folds_back_inside() {
        assert_eq!(bounce(9.0, 2.0, 1.0, 10.0), (9.0, -2.0));
        assert_eq!(bounce(2.0, -1.5, 1.0, 10.0), (1.5, 1.5));
        assert_eq!(bounce(5.0, 1.0, 1.0, 10.0), (6.0, 1.0));
    }

    #[test]
    fn oversized_radius_rejected() {
        let cfg = SceneConfig {
            radius: [3.0, 16.0],
            ..SceneConfig::default()
        };
        assert!(Episode::generate(&cfg, 0, 0).is_err());
    }

    #[test]
    fn shapes_contain_their_centre_and_stay_in_the_circle() {
        for shape in [Shape::Circle, Shape::Square, Shape::Triangle] {
            assert!(shape.contains(0.0, 0.0, 3.0));
            assert!(!shape.contains(3.01, 0.0, 3.0));
            assert!(!shape.contains(2.2, 2.2, 3.0));
        }
        assert!(Shape::Triangle.contains(0.0, -2.9, 3.0));
        assert!(!Shape::Triangle.contains(2.0, -2.0, 3.0));
    }
}
