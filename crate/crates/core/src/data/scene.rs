//! Synthetic street-like scenes with procedural textures.
//!
//! Three inlier classes (background plus two shape classes), randomly coloured
//! training negatives and a separate texture family for test anomalies.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::augment::NegativePatch;
use super::{item_rng, Image, SceneSample};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::losses::{PixelRole, PixelRoleMask};

pub const SCENE_CLASSES: usize = 3;
pub const SCENE_CHANNELS: usize = 3;
/// Distances assigned to the bottom and top image rows, in meters.
pub const DISTANCE_RANGE: (f64, f64) = (5.0, 50.0);
pub const MIN_OUTLIER_FRACTION: f64 = 0.01;
pub const MAX_OUTLIER_FRACTION: f64 = 0.25;
const SENSOR_NOISE: f64 = 0.02;

/// Seeded value noise around a mean colour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureFamily {
    pub name: &'static str,
    pub mean: [f64; 3],
    pub amplitude: f64,
    /// Lattice cells across a 64 pixel span.
    pub frequency: f64,
}

pub const BACKGROUND: TextureFamily = TextureFamily {
    name: "background",
    mean: [0.40, 0.55, 0.35],
    amplitude: 0.08,
    frequency: 4.0,
};

pub const CLASS_TEXTURES: [TextureFamily; 2] = [
    TextureFamily {
        name: "class1",
        mean: [0.75, 0.30, 0.25],
        amplitude: 0.10,
        frequency: 8.0,
    },
    TextureFamily {
        name: "class2",
        mean: [0.25, 0.30, 0.75],
        amplitude: 0.10,
        frequency: 16.0,
    },
];

/// Training negatives take a uniformly random mean colour at least this far
/// (Euclidean, RGB) from every inlier and anomaly mean.
pub const NEGATIVE_MIN_DISTANCE: f64 = 0.35;
pub const NEGATIVE_AMPLITUDE: f64 = 0.10;
pub const NEGATIVE_FREQUENCIES: [f64; 4] = [6.0, 10.0, 12.0, 20.0];

pub const ANOMALY_TEXTURE: TextureFamily = TextureFamily {
    name: "anomaly",
    mean: [0.80, 0.20, 0.85],
    amplitude: 0.15,
    frequency: 24.0,
};

/// Fixed families: inliers, then the test anomaly.
pub fn texture_table() -> [TextureFamily; 4] {
    [BACKGROUND, CLASS_TEXTURES[0], CLASS_TEXTURES[1], ANOMALY_TEXTURE]
}

fn colour_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Draws one negative family by rejection from the RGB cube.
pub fn draw_negative_family(rng: &mut ChaCha8Rng) -> TextureFamily {
    let frequency = NEGATIVE_FREQUENCIES[rng.random_range(0..NEGATIVE_FREQUENCIES.len())];
    loop {
        let mean = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        if texture_table()
            .iter()
            .all(|t| colour_distance(&t.mean, &mean) >= NEGATIVE_MIN_DISTANCE)
        {
            return TextureFamily {
                name: "negative",
                mean,
                amplitude: NEGATIVE_AMPLITUDE,
                frequency,
            };
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_negatives: usize,
    pub negative_min: usize,
    pub negative_max: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 64,
            n_train: 64,
            n_val: 16,
            n_test: 32,
            n_negatives: 32,
            negative_min: 6,
            negative_max: 16,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size {} too small (minimum 16)",
                self.image_size
            )));
        }
        if self.negative_min < 3 || self.negative_min > self.negative_max {
            return Err(Error::Config(format!(
                "invalid negative size range [{}, {}]",
                self.negative_min, self.negative_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneSplits {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

const STREAM_TRAIN: u64 = 0x5C_01;
const STREAM_VAL: u64 = 0x5C_02;
const STREAM_TEST: u64 = 0x5C_03;
const STREAM_NEGATIVE: u64 = 0x5C_04;

struct NoiseField {
    cells: usize,
    lattice: Vec<f64>,
}

impl NoiseField {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let n = cells + 2;
        NoiseField {
            cells,
            lattice: (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// Smooth-stepped bilinear interpolation; `u, v ∈ [0, 1]`.
    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells + 2;
        let (fu, fv) = (u * self.cells as f64, v * self.cells as f64);
        let (i, j) = (fu.floor() as usize, fv.floor() as usize);
        let (tu, tv) = (fu - i as f64, fv - j as f64);
        let (su, sv) = (tu * tu * (3.0 - 2.0 * tu), tv * tv * (3.0 - 2.0 * tv));
        let l = |a: usize, b: usize| self.lattice[a * n + b];
        let top = l(j, i) * (1.0 - su) + l(j, i + 1) * su;
        let bot = l(j + 1, i) * (1.0 - su) + l(j + 1, i + 1) * su;
        top * (1.0 - sv) + bot * sv
    }
}

/// Renders one texture instance over an `h×w` canvas, one noise field per channel.
fn render(tex: &TextureFamily, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let span = h.max(w) as f64;
    let cells = ((tex.frequency * span / 64.0).round() as usize).max(1);
    let fields: Vec<NoiseField> = (0..SCENE_CHANNELS).map(|_| NoiseField::new(rng, cells)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / span, y as f64 / span);
            let mut px = [0.0; 3];
            for c in 0..SCENE_CHANNELS {
                px[c] = tex.mean[c] + tex.amplitude * fields[c].at(u, v);
            }
            out.push(px);
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => py >= y0 && py < y1 && px >= x0 && px < x1,
            Shape::Disc { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
        }
    }

    /// Random rectangle or disc whose area is roughly `area` pixels.
    fn random(rng: &mut ChaCha8Rng, size: f64, area: f64) -> Shape {
        if rng.random_bool(0.5) {
            let aspect = rng.random_range(0.5..2.0f64);
            let hh = (area * aspect).sqrt().min(size);
            let ww = (area / aspect).sqrt().min(size);
            let y0 = rng.random_range(0.0..=size - hh);
            let x0 = rng.random_range(0.0..=size - ww);
            Shape::Rect {
                y0,
                x0,
                y1: y0 + hh,
                x1: x0 + ww,
            }
        } else {
            let r = (area / std::f64::consts::PI).sqrt().min(size / 2.0);
            Shape::Disc {
                cy: rng.random_range(r..=size - r),
                cx: rng.random_range(r..=size - r),
                r,
            }
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn gen_scene(rng: &mut ChaCha8Rng, size: usize, with_anomaly: bool) -> Result<SceneSample> {
    let n = size * size;
    let sz = size as f64;
    let mut pixels = render(&BACKGROUND, size, size, rng);
    let mut labels = vec![0u8; n];

    let n_shapes = rng.random_range(1..=3);
    for _ in 0..n_shapes {
        let class = rng.random_range(1..SCENE_CLASSES);
        let area = rng.random_range(0.04..0.16) * (n as f64);
        let shape = Shape::random(rng, sz, area);
        let tex = render(&CLASS_TEXTURES[class - 1], size, size, rng);
        for y in 0..size {
            for x in 0..size {
                if shape.contains(y, x) {
                    pixels[y * size + x] = tex[y * size + x];
                    labels[y * size + x] = class as u8;
                }
            }
        }
    }

    let mut roles = vec![PixelRole::Inlier; n];
    if with_anomaly {
        let tex = render(&ANOMALY_TEXTURE, size, size, rng);
        let shape = loop {
            let area = rng.random_range(0.03..0.15) * n as f64;
            let shape = Shape::random(rng, sz, area);
            let covered = (0..n).filter(|&i| shape.contains(i / size, i % size)).count();
            let frac = covered as f64 / n as f64;
            if (MIN_OUTLIER_FRACTION..=MAX_OUTLIER_FRACTION).contains(&frac) {
                break shape;
            }
        };
        for i in 0..n {
            if shape.contains(i / size, i % size) {
                pixels[i] = tex[i];
                labels[i] = SCENE_CLASSES as u8;
                roles[i] = PixelRole::Outlier;
            }
        }
    }

    let noise = Normal::new(0.0, SENSOR_NOISE).expect("valid std");
    let mut data = vec![0.0; SCENE_CHANNELS * n];
    for c in 0..SCENE_CHANNELS {
        for i in 0..n {
            data[c * n + i] = quantize(pixels[i][c] + noise.sample(rng));
        }
    }
    Ok(SceneSample {
        image: Image::new(SCENE_CHANNELS, size, size, data)?,
        labels: LabelMap::new(size, size, SCENE_CLASSES, labels)?,
        mask: PixelRoleMask::new(size, size, roles)?,
    })
}

/// Train and val scenes are closed-world; every test scene holds one anomaly.
pub fn gen_scenes(seed: u64, cfg: &SceneConfig) -> Result<SceneSplits> {
    cfg.validate()?;
    let split = |stream, count, anomaly| -> Result<Vec<SceneSample>> {
        (0..count)
            .map(|i| gen_scene(&mut item_rng(seed, stream, i as u64), cfg.image_size, anomaly))
            .collect()
    };
    Ok(SceneSplits {
        train: split(STREAM_TRAIN, cfg.n_train, false)?,
        val: split(STREAM_VAL, cfg.n_val, false)?,
        test: split(STREAM_TEST, cfg.n_test, true)?,
    })
}

/// Negative instances with random held-out colours: discs, rectangles and their unions.
pub fn gen_negative_patches(seed: u64, cfg: &SceneConfig) -> Result<Vec<NegativePatch>> {
    cfg.validate()?;
    (0..cfg.n_negatives)
        .map(|i| {
            let rng = &mut item_rng(seed, STREAM_NEGATIVE, i as u64);
            let h = rng.random_range(cfg.negative_min..=cfg.negative_max);
            let w = rng.random_range(cfg.negative_min..=cfg.negative_max);
            let family = draw_negative_family(rng);
            let tex = render(&family, h, w, rng);
            let mut alpha = vec![false; h * w];
            let (hf, wf) = (h as f64, w as f64);
            let parts = rng.random_range(1..=2);
            for _ in 0..parts {
                let shape = if rng.random_bool(0.5) {
                    Shape::Disc {
                        cy: hf / 2.0,
                        cx: wf / 2.0,
                        r: hf.min(wf) / 2.0,
                    }
                } else {
                    let y0 = rng.random_range(0.0..hf / 3.0);
                    let x0 = rng.random_range(0.0..wf / 3.0);
                    Shape::Rect {
                        y0,
                        x0,
                        y1: hf - rng.random_range(0.0..hf / 3.0),
                        x1: wf - rng.random_range(0.0..wf / 3.0),
                    }
                };
                for y in 0..h {
                    for x in 0..w {
                        alpha[y * w + x] |= shape.contains(y, x);
                    }
                }
            }
            let noise = Normal::new(0.0, SENSOR_NOISE).expect("valid std");
            let n = h * w;
            let mut data = vec![0.0; SCENE_CHANNELS * n];
            for c in 0..SCENE_CHANNELS {
                for p in 0..n {
                    data[c * n + p] = quantize(tex[p][c] + noise.sample(rng));
                }
            }
            NegativePatch::new(Image::new(SCENE_CHANNELS, h, w, data)?, alpha)
        })
        .collect()
}

/// Per-pixel distance to the camera: linear in the row, far at the top.
pub fn distance_map(height: usize, width: usize) -> Vec<f64> {
    let (near, far) = DISTANCE_RANGE;
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let t = if height > 1 {
            (height - 1 - y) as f64 / (height - 1) as f64
        } else {
            0.0
        };
        let d = (near + t * (far - near)).round();
        out.extend(std::iter::repeat_n(d, width));
    }
    out
}
