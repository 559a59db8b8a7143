//! Procedurally rendered pedestrians for desk-scale experiments.
//!
//! Every identity has persistent attributes (hair, skin, top and trouser
//! colours, top pattern, body proportions, an optional bag) laid out head to
//! foot. Every image adds nuisances: a camera-specific background and
//! illumination, background clutter, position and scale jitter, brightness
//! changes, occluding boxes, pixel noise and blur.

use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::record::{DatasetIndex, ImageRecord, ImageSource, Split};
use crate::error::{Error, Result};

/// Strength of the per-image nuisances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Difficulty {
    pub occlusion_prob: f64,
    /// Occluder height as a fraction of the image height (upper bound).
    pub occlusion_max: f64,
    /// Horizontal shift as a fraction of the image width (upper bound).
    pub shift: f64,
    pub brightness_jitter: f64,
    pub clutter_boxes: usize,
    pub noise: f64,
    pub blur_prob: f64,
    /// Spread of the per-identity colours; smaller values make identities
    /// look more alike.
    pub color_spread: f64,
    /// Per-camera colour gain range: each channel is scaled by a factor in
    /// `1 ± camera_gain`.
    pub camera_gain: f64,
    /// Minimum Euclidean distance between the top and trouser colours
    /// (stacked) of any two identities. Redrawn up to 100 times.
    pub min_identity_distance: f64,
}

impl Difficulty {
    pub const STANDARD: Difficulty = Difficulty {
        occlusion_prob: 0.2,
        occlusion_max: 0.2,
        shift: 0.08,
        brightness_jitter: 0.12,
        clutter_boxes: 2,
        noise: 0.04,
        blur_prob: 0.25,
        color_spread: 1.0,
        camera_gain: 0.15,
        min_identity_distance: 0.5,
    };

    /// `STANDARD` without occluders.
    pub const EASY: Difficulty = Difficulty {
        occlusion_prob: 0.0,
        ..Self::STANDARD
    };

    pub const HARD: Difficulty = Difficulty {
        occlusion_prob: 0.6,
        occlusion_max: 0.3,
        shift: 0.12,
        brightness_jitter: 0.2,
        clutter_boxes: 3,
        noise: 0.06,
        blur_prob: 0.4,
        color_spread: 1.0,
        camera_gain: 0.15,
        min_identity_distance: 0.4,
    };
}

impl Default for Difficulty {
    fn default() -> Self {
        Self::STANDARD
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Identities used for training.
    pub num_ids: usize,
    /// Additional identities rendered into query/gallery only.
    pub test_ids: usize,
    pub imgs_per_id: usize,
    pub cameras: u32,
    pub height: u32,
    pub width: u32,
    pub difficulty: Difficulty,
}

impl SyntheticConfig {
    pub fn new(num_ids: usize, imgs_per_id: usize) -> Self {
        Self {
            num_ids,
            test_ids: 0,
            imgs_per_id,
            cameras: 2,
            height: 256,
            width: 128,
            difficulty: Difficulty::STANDARD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 {
            return Err(Error::Config(format!(
                "synthetic dataset needs at least 2 identities, got {}",
                self.num_ids
            )));
        }
        if self.imgs_per_id == 0 || self.cameras == 0 {
            return Err(Error::Config(
                "synthetic images per identity and cameras must be positive".into(),
            ));
        }
        if self.height < 16 || self.width < 8 {
            return Err(Error::Config(
                "synthetic images must be at least 16x8".into(),
            ));
        }
        Ok(())
    }

    /// Renders every image. Training identities come first, numbered from 1.
    pub fn render_all<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<SyntheticImage>> {
        self.validate()?;
        let cams: Vec<CameraLook> = (0..self.cameras)
            .map(|_| CameraLook::draw(rng, &self.difficulty))
            .collect();
        let total = self.num_ids + self.test_ids;
        let mut people: Vec<Person> = Vec::with_capacity(total);
        for _ in 0..total {
            let mut person = Person::draw(rng, &self.difficulty);
            for _ in 0..100 {
                if people
                    .iter()
                    .all(|p| p.distance(&person) >= self.difficulty.min_identity_distance)
                {
                    break;
                }
                person = Person::draw(rng, &self.difficulty);
            }
            people.push(person);
        }
        let mut out = Vec::with_capacity(total * self.imgs_per_id);
        for (i, person) in people.iter().enumerate() {
            for j in 0..self.imgs_per_id {
                let camera = (j as u32 % self.cameras) + 1;
                let (pixels, body_box) = render(
                    person,
                    &cams[(camera - 1) as usize],
                    self.height,
                    self.width,
                    &self.difficulty,
                    rng,
                );
                out.push(SyntheticImage {
                    identity: i as i64 + 1,
                    camera,
                    sequence: j,
                    train: i < self.num_ids,
                    pixels,
                    body_box,
                });
            }
        }
        Ok(out)
    }

    /// Training identities land in the train split. Test identities get one
    /// query per camera; their remaining images form the gallery.
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DatasetIndex> {
        let mut seen = std::collections::BTreeSet::new();
        let records = self
            .render_all(rng)?
            .into_iter()
            .map(|img| {
                let split = if img.train {
                    Split::Train
                } else if seen.insert((img.identity, img.camera)) {
                    Split::Query
                } else {
                    Split::Gallery
                };
                ImageRecord {
                    name: format!(
                        "{:04}_c{}s1_{:06}_00.png",
                        img.identity, img.camera, img.sequence
                    ),
                    source: ImageSource::Pixels(Arc::new(img.pixels)),
                    identity: img.identity,
                    camera: img.camera,
                    split,
                }
            })
            .collect();
        DatasetIndex::from_records(records)
    }
}

/// Training-split synthetic dataset with the standard nuisance level.
pub fn generate_synthetic_dataset<R: Rng + ?Sized>(
    num_ids: usize,
    imgs_per_id: usize,
    rng: &mut R,
) -> Result<DatasetIndex> {
    SyntheticConfig::new(num_ids, imgs_per_id).generate(rng)
}

#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub identity: i64,
    pub camera: u32,
    pub sequence: usize,
    pub train: bool,
    pub pixels: RgbImage,
    /// Person bounding box `(x0, y0, x1, y1)`, exclusive upper bounds.
    pub body_box: (u32, u32, u32, u32),
}

type Color = [f32; 3];

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> Color {
    [rng.random(), rng.random(), rng.random()]
}

fn spread_color<R: Rng + ?Sized>(rng: &mut R, spread: f64) -> Color {
    let s = spread.clamp(0.0, 1.0) as f32;
    let c = random_color(rng);
    c.map(|v| 0.5 + (v - 0.5) * s)
}

#[derive(Debug, Clone)]
struct CameraLook {
    background: Color,
    gain: Color,
    stripe_period: f32,
    stripe_vertical: bool,
}

impl CameraLook {
    fn draw<R: Rng + ?Sized>(rng: &mut R, d: &Difficulty) -> Self {
        let g = d.camera_gain.clamp(0.0, 0.9) as f32;
        Self {
            background: random_color(rng),
            gain: [0; 3].map(|_| 1.0 + rng.random_range(-g..=g)),
            stripe_period: rng.random_range(6.0..24.0),
            stripe_vertical: rng.random_bool(0.5),
        }
    }
}

#[derive(Debug, Clone)]
enum TopPattern {
    Solid,
    Stripes(Color),
    Split(Color),
}

#[derive(Debug, Clone)]
struct Person {
    hair: Color,
    skin: Color,
    top: Color,
    pattern: TopPattern,
    bottom: Color,
    shoes: Color,
    width_frac: f32,
    height_frac: f32,
    head_frac: f32,
    torso_frac: f32,
    bag: Option<(Color, bool)>,
}

impl Person {
    fn distance(&self, other: &Person) -> f64 {
        self.top
            .iter()
            .chain(&self.bottom)
            .zip(other.top.iter().chain(&other.bottom))
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn draw<R: Rng + ?Sized>(rng: &mut R, d: &Difficulty) -> Self {
        const SKINS: [Color; 4] = [
            [0.96, 0.80, 0.69],
            [0.84, 0.64, 0.50],
            [0.62, 0.44, 0.32],
            [0.40, 0.27, 0.20],
        ];
        let top = spread_color(rng, d.color_spread);
        let pattern = match rng.random_range(0..3) {
            0 => TopPattern::Solid,
            1 => TopPattern::Stripes(spread_color(rng, d.color_spread)),
            _ => TopPattern::Split(spread_color(rng, d.color_spread)),
        };
        Self {
            hair: [rng.random_range(0.0..0.5); 3].map(|v: f32| v * rng.random_range(0.8..1.2)),
            skin: SKINS[rng.random_range(0..SKINS.len())],
            top,
            pattern,
            bottom: spread_color(rng, d.color_spread),
            shoes: spread_color(rng, d.color_spread * 0.5),
            width_frac: rng.random_range(0.38..0.6),
            height_frac: rng.random_range(0.78..0.92),
            head_frac: rng.random_range(0.13..0.17),
            torso_frac: rng.random_range(0.34..0.42),
            bag: rng
                .random_bool(0.4)
                .then(|| (spread_color(rng, d.color_spread), rng.random_bool(0.5))),
        }
    }
}

struct Canvas {
    w: i32,
    h: i32,
    px: Vec<Color>,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Self {
            w: w as i32,
            h: h as i32,
            px: vec![[0.0; 3]; (w * h) as usize],
        }
    }

    fn fill(
        &mut self,
        x0: i32,
        y0: i32,
        x1: i32,
        y1: i32,
        mut color: impl FnMut(i32, i32) -> Color,
    ) {
        for y in y0.max(0)..y1.min(self.h) {
            for x in x0.max(0)..x1.min(self.w) {
                self.px[(y * self.w + x) as usize] = color(x, y);
            }
        }
    }

    fn ellipse(&mut self, cx: f32, cy: f32, rx: f32, ry: f32, color: Color) {
        let (x0, x1) = ((cx - rx).floor() as i32, (cx + rx).ceil() as i32);
        let (y0, y1) = ((cy - ry).floor() as i32, (cy + ry).ceil() as i32);
        for y in y0.max(0)..y1.min(self.h) {
            for x in x0.max(0)..x1.min(self.w) {
                let (dx, dy) = ((x as f32 + 0.5 - cx) / rx, (y as f32 + 0.5 - cy) / ry);
                if dx * dx + dy * dy <= 1.0 {
                    self.px[(y * self.w + x) as usize] = color;
                }
            }
        }
    }

    fn box_blur(&mut self) {
        let src = self.px.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                let mut acc = [0.0f32; 3];
                let mut n = 0.0;
                for yy in (y - 1).max(0)..=(y + 1).min(self.h - 1) {
                    for xx in (x - 1).max(0)..=(x + 1).min(self.w - 1) {
                        let p = src[(yy * self.w + xx) as usize];
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                        n += 1.0;
                    }
                }
                self.px[(y * self.w + x) as usize] = acc.map(|v| v / n);
            }
        }
    }

    fn into_image(self) -> RgbImage {
        let w = self.w as u32;
        let mut img = RgbImage::new(w, self.h as u32);
        for (i, p) in self.px.iter().enumerate() {
            let rgb = p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(i as u32 % w, i as u32 / w, Rgb(rgb));
        }
        img
    }
}

fn render<R: Rng + ?Sized>(
    person: &Person,
    cam: &CameraLook,
    height: u32,
    width: u32,
    d: &Difficulty,
    rng: &mut R,
) -> (RgbImage, (u32, u32, u32, u32)) {
    let (wf, hf) = (width as f32, height as f32);
    let mut canvas = Canvas::new(width, height);

    // Background: camera colour with a per-image tint and a stripe texture.
    let tint: Color = [0; 3].map(|_| rng.random_range(-0.08..0.08));
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let bg = cam.background;
    canvas.fill(0, 0, width as i32, height as i32, |x, y| {
        let t = if cam.stripe_vertical { x } else { y } as f32;
        let s = 0.08 * (t * std::f32::consts::TAU / cam.stripe_period + phase).sin();
        [
            bg[0] + tint[0] + s,
            bg[1] + tint[1] + s,
            bg[2] + tint[2] + s,
        ]
    });
    for _ in 0..d.clutter_boxes {
        let c = random_color(rng);
        let (bw, bh) = (
            rng.random_range(0.1..0.4) * wf,
            rng.random_range(0.05..0.25) * hf,
        );
        let (bx, by) = (
            rng.random_range(0.0..wf - bw),
            rng.random_range(0.0..hf - bh),
        );
        canvas.fill(
            bx as i32,
            by as i32,
            (bx + bw) as i32,
            (by + bh) as i32,
            |_, _| c,
        );
    }

    // Person, laid out head to foot.
    let scale = rng.random_range(0.94..1.06f32);
    let body_h = (person.height_frac * scale).min(0.98) * hf;
    let body_w = (person.width_frac * scale).min(0.9) * wf;
    let shift = d.shift as f32 * wf;
    let cx = wf / 2.0 + rng.random_range(-shift..=shift);
    let top_y = ((hf - body_h) / 2.0 + rng.random_range(-0.03..=0.03) * hf).clamp(0.0, hf - body_h);
    let head_h = person.head_frac * body_h;
    let torso_h = person.torso_frac * body_h;
    let legs_h = body_h - head_h - torso_h;
    let shoe_h = 0.06 * body_h;
    let light = 1.0 + rng.random_range(-(d.brightness_jitter as f32)..=d.brightness_jitter as f32);

    let (bx0, bx1) = (cx - body_w / 2.0, cx + body_w / 2.0);
    let torso_y0 = top_y + head_h;
    let legs_y0 = torso_y0 + torso_h;
    let bottom = person.bottom;
    let leg_gap = 0.08 * body_w;
    canvas.fill(
        (bx0 + 0.1 * body_w) as i32,
        legs_y0 as i32,
        (cx - leg_gap / 2.0) as i32,
        (legs_y0 + legs_h - shoe_h) as i32,
        |_, _| bottom,
    );
    canvas.fill(
        (cx + leg_gap / 2.0) as i32,
        legs_y0 as i32,
        (bx1 - 0.1 * body_w) as i32,
        (legs_y0 + legs_h - shoe_h) as i32,
        |_, _| bottom,
    );
    let shoes = person.shoes;
    canvas.fill(
        (bx0 + 0.05 * body_w) as i32,
        (legs_y0 + legs_h - shoe_h) as i32,
        (bx1 - 0.05 * body_w) as i32,
        (legs_y0 + legs_h) as i32,
        |_, _| shoes,
    );
    let top = person.top;
    let pattern = person.pattern.clone();
    let stripe = (torso_h / 6.0).max(2.0);
    canvas.fill(
        bx0 as i32,
        torso_y0 as i32,
        bx1 as i32,
        legs_y0 as i32,
        |x, y| match &pattern {
            TopPattern::Solid => top,
            TopPattern::Stripes(c) => {
                if (((y as f32 - torso_y0) / stripe) as i32) % 2 == 0 {
                    top
                } else {
                    *c
                }
            }
            TopPattern::Split(c) => {
                if (x as f32) < cx {
                    top
                } else {
                    *c
                }
            }
        },
    );
    canvas.ellipse(
        cx,
        top_y + head_h * 0.55,
        head_h * 0.36,
        head_h * 0.45,
        person.skin,
    );
    canvas.fill(
        (cx - head_h * 0.36) as i32,
        top_y as i32,
        (cx + head_h * 0.36) as i32,
        (top_y + head_h * 0.3) as i32,
        |_, _| person.hair,
    );
    if let Some((color, left)) = person.bag {
        let (w_bag, h_bag) = (0.22 * body_w, 0.5 * torso_h);
        let x = if left {
            bx0 - w_bag * 0.5
        } else {
            bx1 - w_bag * 0.5
        };
        let y = torso_y0 + 0.35 * torso_h;
        canvas.fill(
            x as i32,
            y as i32,
            (x + w_bag) as i32,
            (y + h_bag) as i32,
            |_, _| color,
        );
    }
    for p in canvas.px.iter_mut() {
        *p = p.map(|v| v * light);
    }

    if rng.random_bool(d.occlusion_prob) {
        let c = random_color(rng);
        let oh = rng.random_range(0.08..=d.occlusion_max.max(0.08)) as f32 * hf;
        let ow = rng.random_range(0.4..1.0) * wf;
        let oy = rng.random_range(top_y..(top_y + body_h - oh).max(top_y + 1.0));
        let ox = rng.random_range(0.0..(wf - ow).max(1.0));
        canvas.fill(
            ox as i32,
            oy as i32,
            (ox + ow) as i32,
            (oy + oh) as i32,
            |_, _| c,
        );
    }

    let gain = cam.gain;
    let noise = d.noise as f32;
    for p in canvas.px.iter_mut() {
        for c in 0..3 {
            p[c] = p[c] * gain[c]
                + if noise > 0.0 {
                    rng.random_range(-noise..=noise)
                } else {
                    0.0
                };
        }
    }
    if rng.random_bool(d.blur_prob) {
        canvas.box_blur();
    }
    let bbox = (
        bx0.max(0.0) as u32,
        top_y.max(0.0) as u32,
        (bx1.ceil() as u32).min(width),
        ((top_y + body_h).ceil() as u32).min(height),
    );
    (canvas.into_image(), bbox)
}
