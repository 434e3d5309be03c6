//! Deterministic synthetic scenes with exact ground-truth flow and labels.
//!
//! Sprites move by `p' = c + d + s (p - c)` where `c` is the sprite centre,
//! `d` a translation and `s` a scale factor. Everything not covered by a
//! sprite is background, split into a nature band above the horizon and a
//! flat band below it, moving by a single translation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Field2D;
use crate::error::{Error, Result};
use crate::types::{Category, FlowField, Image, LabelMap, Mask};

/// Binomial smoothing passes applied to texture noise.
const TEXTURE_SMOOTHING_PASSES: usize = 4;
/// Texture intensity range before tinting.
const TEXTURE_AMPLITUDE: f64 = 0.6;
/// Extra texture border so shifted samples stay on the grid.
const TEXTURE_MARGIN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpriteShape {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub category: Category,
    pub shape: SpriteShape,
    /// Centre `(x, y)` in pixels.
    pub center: (f64, f64),
    /// Half extents `(x, y)` in pixels.
    pub half_size: (f64, f64),
    pub texture_seed: u64,
    /// Per-channel base intensity.
    pub tint: [f64; 3],
    /// Translation `(dx, dy)` in pixels per frame.
    pub translation: (f64, f64),
    /// Scale factor about the centre; values above 1 approach the camera.
    pub scale: f64,
}

impl SpriteSpec {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - self.center.0) / self.half_size.0, (y - self.center.1) / self.half_size.1);
        match self.shape {
            SpriteShape::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            SpriteShape::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }

    /// Displacement of the point `(x, y)` under the sprite's motion.
    pub fn flow_at(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.translation.0 + (self.scale - 1.0) * (x - self.center.0),
            self.translation.1 + (self.scale - 1.0) * (y - self.center.1),
        )
    }

    /// Maps a frame-2 position back to the sprite's frame-1 position.
    fn source_of(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.center.0 + (x - self.center.0 - self.translation.0) / self.scale,
            self.center.1 + (y - self.center.1 - self.translation.1) / self.scale,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background_seed: u64,
    pub background_tint: [f64; 3],
    pub background_motion: (f64, f64),
    /// First row of the flat band; rows above are nature.
    pub horizon: usize,
    /// Painter's order: later sprites cover earlier ones.
    pub sprites: Vec<SpriteSpec>,
    pub rng_seed: u64,
}

/// A rendered image pair with exact flow and labels for the first frame.
#[derive(Clone, Debug)]
pub struct SceneInstance {
    pub i1: Image,
    pub i2: Image,
    pub gt_flow: FlowField,
    pub labels: LabelMap,
}

/// Smoothed seeded noise with wrap-around, normalised to `[0, 1]`.
fn smooth_noise(height: usize, width: usize, seed: u64) -> Field2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = Field2D::from_fn(height, width, |_, _| rng.random::<f64>());
    for _ in 0..TEXTURE_SMOOTHING_PASSES {
        f = Field2D::from_fn(height, width, |y, x| {
            let xm = (x + width - 1) % width;
            let xp = (x + 1) % width;
            0.25 * f.get(y, xm) + 0.5 * f.get(y, x) + 0.25 * f.get(y, xp)
        });
        f = Field2D::from_fn(height, width, |y, x| {
            let ym = (y + height - 1) % height;
            let yp = (y + 1) % height;
            0.25 * f.get(ym, x) + 0.5 * f.get(y, x) + 0.25 * f.get(yp, x)
        });
    }
    let (lo, hi) = f
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    f.map(|v| (v - lo) / span)
}

/// Band-limited texture that tiles periodically, with values in `[0.2, 0.8]`.
pub fn periodic_texture(height: usize, width: usize, seed: u64) -> Field2D {
    smooth_noise(height, width, seed).map(|t| 0.5 + TEXTURE_AMPLITUDE * (t - 0.5))
}

struct Texture {
    grid: Field2D,
    origin: (f64, f64),
}

impl Texture {
    /// Texture covering `[x0, x0 + w) x [y0, y0 + h)` plus a margin.
    fn new(x0: f64, y0: f64, width: usize, height: usize, seed: u64) -> Self {
        let m = TEXTURE_MARGIN;
        Self {
            grid: smooth_noise(height + 2 * m, width + 2 * m, seed),
            origin: (x0 - m as f64, y0 - m as f64),
        }
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        self.grid.sample(y - self.origin.1, x - self.origin.0)
    }
}

fn tinted(t: f64, tint: f64) -> f64 {
    (tint + TEXTURE_AMPLITUDE * (t - 0.5)).clamp(0.0, 1.0)
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::invalid(format!(
                "scene must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        let (w, h) = (self.width as f64 - 1.0, self.height as f64 - 1.0);
        for (i, s) in self.sprites.iter().enumerate() {
            if s.category == Category::Void {
                return Err(Error::invalid(format!("sprite {i} has category void")));
            }
            if !(s.scale > 0.0) || s.half_size.0 <= 0.0 || s.half_size.1 <= 0.0 {
                return Err(Error::invalid(format!("sprite {i} has a non-positive size or scale")));
            }
            let before = (
                s.center.0 - s.half_size.0,
                s.center.1 - s.half_size.1,
                s.center.0 + s.half_size.0,
                s.center.1 + s.half_size.1,
            );
            let (cx, cy) = (s.center.0 + s.translation.0, s.center.1 + s.translation.1);
            let after = (
                cx - s.scale * s.half_size.0,
                cy - s.scale * s.half_size.1,
                cx + s.scale * s.half_size.0,
                cy + s.scale * s.half_size.1,
            );
            for (x0, y0, x1, y1) in [before, after] {
                if x0 < 0.0 || y0 < 0.0 || x1 > w || y1 > h {
                    return Err(Error::invalid(format!(
                        "sprite {i} ({}) leaves the {}x{} frame",
                        s.category, self.height, self.width
                    )));
                }
            }
        }
        Ok(())
    }

    fn background_category(&self, y: usize) -> Category {
        if y < self.horizon {
            Category::Nature
        } else {
            Category::Flat
        }
    }

    /// Index of the topmost sprite covering `(x, y)` in frame 1.
    fn sprite_at(&self, x: f64, y: f64) -> Option<usize> {
        self.sprites.iter().rposition(|s| s.contains(x, y))
    }

    /// Topmost sprite covering `(x, y)` in frame 2, with its frame-1 source position.
    fn sprite_at_frame2(&self, x: f64, y: f64) -> Option<(usize, (f64, f64))> {
        self.sprites.iter().enumerate().rev().find_map(|(i, s)| {
            let (sx, sy) = s.source_of(x, y);
            s.contains(sx, sy).then_some((i, (sx, sy)))
        })
    }

    /// Owner of each frame-2 pixel: `Some(sprite)` or `None` for background.
    fn frame2_owners(&self) -> Vec<Option<usize>> {
        (0..self.height * self.width)
            .map(|i| {
                let (y, x) = (i / self.width, i % self.width);
                self.sprite_at_frame2(x as f64, y as f64).map(|(s, _)| s)
            })
            .collect()
    }

    /// Pixels of frame 1 whose point is visible in frame 2, with every
    /// bilinear neighbour of its frame-2 position owned by the same surface.
    pub fn visible_mask(&self) -> Mask {
        let owners2 = self.frame2_owners();
        let (w, h) = (self.width, self.height);
        Mask::from_fn(h, w, |y, x| {
            let (xf, yf) = (x as f64, y as f64);
            let (owner, (u, v)) = match self.sprite_at(xf, yf) {
                Some(i) => (Some(i), self.sprites[i].flow_at(xf, yf)),
                None => (None, self.background_motion),
            };
            let (x2, y2) = (xf + u, yf + v);
            if x2 < 0.0 || y2 < 0.0 || x2 > (w - 1) as f64 || y2 > (h - 1) as f64 {
                return false;
            }
            let (x0, y0) = (x2.floor() as usize, y2.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
                .iter()
                .all(|&(yy, xx)| owners2[yy * w + xx] == owner)
        })
    }
}

/// Renders a scene specification.
pub fn render(spec: &SceneSpec) -> Result<SceneInstance> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let pad = spec.background_motion.0.abs().max(spec.background_motion.1.abs()).ceil() as usize;
    let background = Texture::new(
        -(pad as f64),
        -(pad as f64),
        w + 2 * pad,
        h + 2 * pad,
        spec.background_seed,
    );
    let sprite_textures: Vec<Texture> = spec
        .sprites
        .iter()
        .map(|s| {
            let (x0, y0) = (s.center.0 - s.half_size.0, s.center.1 - s.half_size.1);
            let (sw, sh) = ((2.0 * s.half_size.0).ceil() as usize + 1, (2.0 * s.half_size.1).ceil() as usize + 1);
            Texture::new(x0, y0, sw, sh, s.texture_seed)
        })
        .collect();

    let frame1 = |x: f64, y: f64, c: usize| match spec.sprite_at(x, y) {
        Some(i) => tinted(sprite_textures[i].sample(x, y), spec.sprites[i].tint[c]),
        None => tinted(background.sample(x, y), spec.background_tint[c]),
    };
    let frame2 = |x: f64, y: f64, c: usize| match spec.sprite_at_frame2(x, y) {
        Some((i, (sx, sy))) => tinted(sprite_textures[i].sample(sx, sy), spec.sprites[i].tint[c]),
        None => {
            let (dx, dy) = spec.background_motion;
            tinted(background.sample(x - dx, y - dy), spec.background_tint[c])
        }
    };

    let i1 = Image::from_fn(h, w, |y, x, c| frame1(x as f64, y as f64, c))?;
    let i2 = Image::from_fn(h, w, |y, x, c| frame2(x as f64, y as f64, c))?;
    let gt_flow = FlowField::from_fn(h, w, |y, x| match spec.sprite_at(x as f64, y as f64) {
        Some(i) => spec.sprites[i].flow_at(x as f64, y as f64),
        None => spec.background_motion,
    });
    let mut labels = LabelMap::filled(h, w, Category::Void);
    for y in 0..h {
        for x in 0..w {
            let c = match spec.sprite_at(x as f64, y as f64) {
                Some(i) => spec.sprites[i].category,
                None => spec.background_category(y),
            };
            labels.set(y, x, c);
        }
    }
    Ok(SceneInstance {
        i1,
        i2,
        gt_flow,
        labels,
    })
}

pub const DEFAULT_SCENE_SIDE: usize = 64;

/// Deterministic suite of `side x side` scenes, each with a vehicle and a
/// pedestrian over a nature/flat background.
pub fn scene_suite(count: usize, base_seed: u64) -> Result<Vec<SceneSpec>> {
    scene_suite_sized(count, base_seed, DEFAULT_SCENE_SIDE, DEFAULT_SCENE_SIDE)
}

pub fn scene_suite_sized(count: usize, base_seed: u64, width: usize, height: usize) -> Result<Vec<SceneSpec>> {
    if count == 0 {
        return Err(Error::invalid("scene suite needs at least one scene"));
    }
    if width < 32 || height < 32 {
        return Err(Error::invalid(format!(
            "suite scenes must be at least 32x32, got {height}x{width}"
        )));
    }
    (0..count)
        .map(|i| {
            let seed = base_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            let spec = random_scene(width, height, seed);
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

fn random_tint(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(0.4..0.6))
}

fn random_scene(width: usize, height: usize, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (width as f64, height as f64);
    let horizon = (hf * rng.random_range(0.38..0.48)) as usize;
    let background_motion = (rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2));

    let mut sprites = Vec::new();
    if rng.random_bool(0.5) {
        let hs = (wf * rng.random_range(0.08..0.14), hf * rng.random_range(0.1..0.16));
        sprites.push(SpriteSpec {
            category: Category::Construction,
            shape: SpriteShape::Rectangle,
            center: (rng.random_range(hs.0 + 2.0..wf - hs.0 - 3.0), hs.1 + 2.0 + rng.random_range(0.0..3.0)),
            half_size: hs,
            texture_seed: rng.random(),
            tint: random_tint(&mut rng),
            translation: background_motion,
            scale: 1.0,
        });
    }

    // Vehicle: wide rectangle below the horizon, approaching.
    let scale = rng.random_range(1.02..1.08);
    let hs = (wf * rng.random_range(0.13..0.19), hf * rng.random_range(0.08..0.12));
    let margin = (hs.0 * scale + 4.0, hs.1 * scale + 4.0);
    let translation = (rng.random_range(-1.5..1.5), rng.random_range(-0.5..0.5));
    sprites.push(SpriteSpec {
        category: Category::Vehicle,
        shape: SpriteShape::Rectangle,
        center: (
            rng.random_range(margin.0..wf - 1.0 - margin.0),
            rng.random_range((horizon as f64 + hs.1).max(margin.1)..hf - 1.0 - margin.1),
        ),
        half_size: hs,
        texture_seed: rng.random(),
        tint: random_tint(&mut rng),
        translation,
        scale,
    });

    // Pedestrian: small ellipse, translating.
    let hs = (wf * rng.random_range(0.03..0.05), hf * rng.random_range(0.08..0.11));
    let translation = (rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3));
    let margin = (hs.0 + 3.0, hs.1 + 3.0);
    sprites.push(SpriteSpec {
        category: Category::Human,
        shape: SpriteShape::Ellipse,
        center: (
            rng.random_range(margin.0..wf - 1.0 - margin.0),
            rng.random_range((horizon as f64).max(margin.1)..hf - 1.0 - margin.1),
        ),
        half_size: hs,
        texture_seed: rng.random(),
        tint: random_tint(&mut rng),
        translation,
        scale: 1.0,
    });

    SceneSpec {
        width,
        height,
        background_seed: rng.random(),
        background_tint: random_tint(&mut rng),
        background_motion,
        horizon,
        sprites,
        rng_seed: seed,
    }
}
