//! Inlier crop augmentation and negative pasting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Image, SceneSample};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::losses::{PixelRole, PixelRoleMask};

/// Attempts at drawing a scale that leaves the image at least as large as the crop.
const MAX_JITTER_DRAWS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub hflip_prob: f64,
    pub crop_size: usize,
    pub paste_count: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_min: 0.5,
            scale_max: 2.0,
            hflip_prob: 0.5,
            crop_size: 64,
            paste_count: 2,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::Config(format!(
                "invalid scale jitter range [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} not in [0, 1]", self.hflip_prob)));
        }
        if self.crop_size == 0 {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        Ok(())
    }
}

/// A negative instance: texture plus binary alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativePatch {
    pub image: Image,
    pub alpha: Vec<bool>,
}

impl NegativePatch {
    pub fn new(image: Image, alpha: Vec<bool>) -> Result<Self> {
        if alpha.len() != image.height() * image.width() {
            return Err(Error::shape(image.height() * image.width(), alpha.len()));
        }
        if !alpha.iter().any(|&a| a) {
            return Err(Error::Data("negative patch has an empty alpha mask".into()));
        }
        Ok(NegativePatch { image, alpha })
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn coverage(&self) -> usize {
        self.alpha.iter().filter(|&&a| a).count()
    }
}

/// Alpha-composites `paste_count` patches (drawn with replacement) at uniform positions
/// fully inside the sample. Pasted pixels become outliers. Pastes may overlap each other.
pub fn paste_negatives(
    sample: &SceneSample,
    patches: &[NegativePatch],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<SceneSample> {
    let mut out = sample.clone();
    if patches.is_empty() || cfg.paste_count == 0 {
        return Ok(out);
    }
    let (h, w) = (sample.height(), sample.width());
    for p in patches {
        if p.height() > h || p.width() > w {
            return Err(Error::contract(format!(
                "negative patch {}x{} does not fit a {h}x{w} crop",
                p.height(),
                p.width()
            )));
        }
        if p.image.channels() != sample.image.channels() {
            return Err(Error::shape(sample.image.channels(), p.image.channels()));
        }
    }
    let outlier = sample.labels.outlier_label();
    for _ in 0..cfg.paste_count {
        let p = &patches[rng.random_range(0..patches.len())];
        let y0 = rng.random_range(0..=h - p.height());
        let x0 = rng.random_range(0..=w - p.width());
        for py in 0..p.height() {
            for px in 0..p.width() {
                if !p.alpha[py * p.width() + px] {
                    continue;
                }
                let (y, x) = (y0 + py, x0 + px);
                for c in 0..p.image.channels() {
                    out.image.set(c, y, x, p.image.get(c, py, px));
                }
                out.labels.set(y, x, outlier);
                out.mask.set(y, x, PixelRole::Outlier);
            }
        }
    }
    Ok(out)
}

/// Fully resolved geometry of one augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub flip: bool,
    /// Top-left corner of the crop in the rescaled (and padded) image.
    pub crop_y: usize,
    pub crop_x: usize,
    pub crop_size: usize,
}

fn scaled_len(len: usize, scale: f64) -> usize {
    ((len as f64 * scale).round() as usize).max(1)
}

/// Bilinear resize of the image, nearest-neighbour resize of labels and roles.
fn rescale(sample: &SceneSample, out_h: usize, out_w: usize) -> Result<SceneSample> {
    let (h, w) = (sample.height(), sample.width());
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let c = sample.image.channels();
    let mut image = Image::zeros(c, out_h, out_w);
    let mut labels = vec![0u8; out_h * out_w];
    let mut roles = vec![PixelRole::Ignore; out_h * out_w];
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        let ny = (((y as f64 + 0.5) * sy) as usize).min(h - 1);
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let g = |yy, xx| sample.image.get(ch, yy, xx);
                let top = g(y0, x0) * (1.0 - tx) + g(y0, x1) * tx;
                let bottom = g(y1, x0) * (1.0 - tx) + g(y1, x1) * tx;
                image.set(ch, y, x, top * (1.0 - ty) + bottom * ty);
            }
            let nx = (((x as f64 + 0.5) * sx) as usize).min(w - 1);
            labels[y * out_w + x] = sample.labels.get(ny, nx);
            roles[y * out_w + x] = sample.mask.get(ny, nx);
        }
    }
    Ok(SceneSample {
        image,
        labels: LabelMap::new(out_h, out_w, sample.labels.num_classes(), labels)?,
        mask: PixelRoleMask::new(out_h, out_w, roles)?,
    })
}

/// Index into `0..len` after mirror reflection (without repeating the edge pixel).
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// Pads symmetrically by reflection up to at least `min_h × min_w`.
fn pad_reflect(sample: &SceneSample, min_h: usize, min_w: usize) -> Result<SceneSample> {
    let (h, w) = (sample.height(), sample.width());
    let (out_h, out_w) = (h.max(min_h), w.max(min_w));
    if (out_h, out_w) == (h, w) {
        return Ok(sample.clone());
    }
    let (top, left) = (((out_h - h) / 2) as isize, ((out_w - w) / 2) as isize);
    let c = sample.image.channels();
    let mut image = Image::zeros(c, out_h, out_w);
    let mut labels = vec![0u8; out_h * out_w];
    let mut roles = vec![PixelRole::Ignore; out_h * out_w];
    for y in 0..out_h {
        let sy = reflect(y as isize - top, h);
        for x in 0..out_w {
            let sx = reflect(x as isize - left, w);
            for ch in 0..c {
                image.set(ch, y, x, sample.image.get(ch, sy, sx));
            }
            labels[y * out_w + x] = sample.labels.get(sy, sx);
            roles[y * out_w + x] = sample.mask.get(sy, sx);
        }
    }
    Ok(SceneSample {
        image,
        labels: LabelMap::new(out_h, out_w, sample.labels.num_classes(), labels)?,
        mask: PixelRoleMask::new(out_h, out_w, roles)?,
    })
}

/// Applies fixed geometry: rescale, optional horizontal flip, square crop.
pub fn augment_with(sample: &SceneSample, params: AugmentParams) -> Result<SceneSample> {
    let (h, w) = (sample.height(), sample.width());
    let scaled = if params.scale == 1.0 {
        sample.clone()
    } else {
        rescale(sample, scaled_len(h, params.scale), scaled_len(w, params.scale))?
    };
    let padded = pad_reflect(&scaled, params.crop_size, params.crop_size)?;
    let (ph, pw) = (padded.height(), padded.width());
    let cs = params.crop_size;
    if params.crop_y + cs > ph || params.crop_x + cs > pw {
        return Err(Error::contract(format!(
            "crop {cs}x{cs} at ({}, {}) exceeds {ph}x{pw}",
            params.crop_y, params.crop_x
        )));
    }
    let c = padded.image.channels();
    let mut image = Image::zeros(c, cs, cs);
    let mut labels = vec![0u8; cs * cs];
    let mut roles = vec![PixelRole::Ignore; cs * cs];
    for y in 0..cs {
        let sy = params.crop_y + y;
        for x in 0..cs {
            let cx = params.crop_x + x;
            let sx = if params.flip { pw - 1 - cx } else { cx };
            for ch in 0..c {
                image.set(ch, y, x, padded.image.get(ch, sy, sx));
            }
            labels[y * cs + x] = padded.labels.get(sy, sx);
            roles[y * cs + x] = padded.mask.get(sy, sx);
        }
    }
    Ok(SceneSample {
        image,
        labels: LabelMap::new(cs, cs, sample.labels.num_classes(), labels)?,
        mask: PixelRoleMask::new(cs, cs, roles)?,
    })
}

/// Draws augmentation geometry for a `height × width` sample.
///
/// Scales that would leave the image smaller than the crop are redrawn a bounded
/// number of times; if all draws fail the last one is kept and the image is
/// reflect-padded.
pub fn draw_params(height: usize, width: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> AugmentParams {
    let mut scale = 1.0;
    for _ in 0..MAX_JITTER_DRAWS {
        scale = if cfg.scale_min == cfg.scale_max {
            cfg.scale_min
        } else {
            rng.random_range(cfg.scale_min..=cfg.scale_max)
        };
        if scaled_len(height, scale).min(scaled_len(width, scale)) >= cfg.crop_size {
            break;
        }
    }
    let flip = rng.random_bool(cfg.hflip_prob);
    let h = scaled_len(height, scale).max(cfg.crop_size);
    let w = scaled_len(width, scale).max(cfg.crop_size);
    AugmentParams {
        scale,
        flip,
        crop_y: rng.random_range(0..=h - cfg.crop_size),
        crop_x: rng.random_range(0..=w - cfg.crop_size),
        crop_size: cfg.crop_size,
    }
}

/// Scale jitter, random horizontal flip and a random square crop.
pub fn augment(sample: &SceneSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<SceneSample> {
    cfg.validate()?;
    let params = draw_params(sample.height(), sample.width(), cfg, rng);
    augment_with(sample, params)
}
