//! Weak (geometric) and strong (photometric + CutMix) augmentation.
//!
//! All geometric randomness lives in the weak view; the strong view only
//! changes pixel values, so a pseudo-label computed on the weak view stays
//! aligned with the strong view pixel for pixel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::IGNORE_LABEL;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutMixBox {
    pub partner: usize,
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

/// Every sampled augmentation parameter of one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub scale: f64,
    /// Side length after resizing.
    pub scaled_size: usize,
    /// Crop origin `(y, x)` in the resized image; negative when the resized
    /// image is smaller than the output and gets padded.
    pub crop: (i64, i64),
    /// Clockwise quarter turns.
    pub rotation: u8,
    pub hflip: bool,
    pub vflip: bool,
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
    pub saturation: Option<f64>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
    pub cutmix: Option<CutMixBox>,
}

impl AugRecord {
    pub fn identity(size: usize) -> Self {
        AugRecord {
            scale: 1.0,
            scaled_size: size,
            crop: (0, 0),
            rotation: 0,
            hflip: false,
            vflip: false,
            brightness: None,
            contrast: None,
            saturation: None,
            grayscale: false,
            blur_sigma: None,
            cutmix: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub jitter_prob: f64,
    pub jitter_strength: f64,
    pub gray_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub cutmix_prob: f64,
    pub cutmix_area: (f64, f64),
    pub cutmix_aspect: (f64, f64),
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            scale_min: 0.5,
            scale_max: 2.0,
            jitter_prob: 0.8,
            jitter_strength: 0.4,
            gray_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            cutmix_prob: 0.5,
            cutmix_area: (0.1, 0.5),
            cutmix_aspect: (0.5, 2.0),
        }
    }
}

pub fn sample_weak_record(size: usize, config: &AugConfig, rng: &mut Stream) -> AugRecord {
    let scale = rng.random_range(config.scale_min..=config.scale_max);
    let scaled_size = ((size as f64 * scale).round() as usize).max(1);
    let slack = scaled_size as i64 - size as i64;
    let (lo, hi) = if slack >= 0 { (0, slack) } else { (slack, 0) };
    let crop = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
    AugRecord {
        scale,
        scaled_size,
        crop,
        rotation: rng.random_range(0..4u8),
        hflip: rng.random_bool(0.5),
        vflip: rng.random_bool(0.5),
        ..AugRecord::identity(size)
    }
}

/// Map an output pixel back to its `(row, col)` in the resized image, which
/// may fall outside `[0, scaled_size)` where the crop was padded.
fn source_coord(rec: &AugRecord, n: usize, y: usize, x: usize) -> (i64, i64) {
    let (mut i, mut j) = (y, x);
    if rec.vflip {
        i = n - 1 - i;
    }
    if rec.hflip {
        j = n - 1 - j;
    }
    for _ in 0..rec.rotation % 4 {
        (i, j) = (n - 1 - j, i);
    }
    (i as i64 + rec.crop.0, j as i64 + rec.crop.1)
}

/// Apply the geometric part of `rec`: bilinear for the image, nearest for the
/// mask. Padded pixels become 0 in the image and [`IGNORE_LABEL`] in the mask.
pub fn apply_geometry(rec: &AugRecord, image: &Tensor, mask: Option<&[u16]>) -> (Tensor, Option<Vec<u16>>) {
    let n = image.shape()[0];
    let src = image.data();
    let ratio = n as f64 / rec.scaled_size as f64;
    let mut out = vec![0.0; n * n * 3];
    let mut out_mask = mask.map(|_| vec![IGNORE_LABEL; n * n]);
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = source_coord(rec, n, y, x);
            if sy < 0 || sx < 0 || sy >= rec.scaled_size as i64 || sx >= rec.scaled_size as i64 {
                continue;
            }
            let fy = ((sy as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n - 1) as f64);
            let fx = ((sx as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n - 1) as f64);
            let (y0, x0) = (fy as usize, fx as usize);
            let (y1, x1) = ((y0 + 1).min(n - 1), (x0 + 1).min(n - 1));
            let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| src[(yy * n + xx) * 3 + c];
                let mut v = p(y0, x0) * (1.0 - wy) * (1.0 - wx);
                if wx > 0.0 {
                    v += p(y0, x1) * (1.0 - wy) * wx;
                }
                if wy > 0.0 {
                    v += p(y1, x0) * wy * (1.0 - wx);
                    if wx > 0.0 {
                        v += p(y1, x1) * wy * wx;
                    }
                }
                out[(y * n + x) * 3 + c] = v;
            }
            if let (Some(m), Some(om)) = (mask, out_mask.as_mut()) {
                let my = (((sy as f64 + 0.5) * ratio) as usize).min(n - 1);
                let mx = (((sx as f64 + 0.5) * ratio) as usize).min(n - 1);
                om[y * n + x] = m[my * n + mx];
            }
        }
    }
    (Tensor::new(vec![n, n, 3], out).unwrap(), out_mask)
}

/// Random scaling, cropping, right-angle rotation and flips.
pub fn weak_augment(
    image: &Tensor,
    mask: Option<&[u16]>,
    config: &AugConfig,
    rng: &mut Stream,
) -> (Tensor, Option<Vec<u16>>, AugRecord) {
    let rec = sample_weak_record(image.shape()[0], config, rng);
    let (view, m) = apply_geometry(&rec, image, mask);
    (view, m, rec)
}

pub fn sample_strong_record(size: usize, config: &AugConfig, rng: &mut Stream) -> AugRecord {
    let mut rec = AugRecord::identity(size);
    let s = config.jitter_strength;
    if rng.random_bool(config.jitter_prob) {
        rec.brightness = Some(rng.random_range(1.0 - s..=1.0 + s));
        rec.contrast = Some(rng.random_range(1.0 - s..=1.0 + s));
        rec.saturation = Some(rng.random_range(1.0 - s..=1.0 + s));
    }
    rec.grayscale = rng.random_bool(config.gray_prob);
    if rng.random_bool(config.blur_prob) {
        rec.blur_sigma = Some(rng.random_range(config.blur_sigma.0..=config.blur_sigma.1));
    }
    rec
}

fn luminance(px: &[f64]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Tensor {
    let n = image.shape()[0];
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let mut kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let src = image.data();
    let clamp = |v: i64| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let xx = clamp(x as i64 + i as i64 - radius as i64);
                    acc += k * src[(y * n + xx) * 3 + c];
                }
                tmp[(y * n + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let yy = clamp(y as i64 + i as i64 - radius as i64);
                    acc += k * tmp[(yy * n + x) * 3 + c];
                }
                out[(y * n + x) * 3 + c] = acc;
            }
        }
    }
    Tensor::new(vec![n, n, 3], out).unwrap()
}

/// Apply the photometric part of `rec`. Values stay in `[0, 1]`.
pub fn apply_photometric(rec: &AugRecord, image: &Tensor) -> Tensor {
    let mut img = image.clone();
    let clamp = |d: &mut [f64]| d.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    if let Some(b) = rec.brightness {
        img.data_mut().iter_mut().for_each(|v| *v *= b);
        clamp(img.data_mut());
    }
    if let Some(c) = rec.contrast {
        let pixels = img.numel() / 3;
        let mean = img.data().chunks(3).map(luminance).sum::<f64>() / pixels as f64;
        img.data_mut().iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
        clamp(img.data_mut());
    }
    if let Some(s) = rec.saturation {
        for px in img.data_mut().chunks_mut(3) {
            let l = luminance(px);
            px.iter_mut().for_each(|v| *v = l + (*v - l) * s);
        }
        clamp(img.data_mut());
    }
    if rec.grayscale {
        for px in img.data_mut().chunks_mut(3) {
            let l = luminance(px).clamp(0.0, 1.0);
            px.fill(l);
        }
    }
    if let Some(sigma) = rec.blur_sigma {
        img = gaussian_blur(&img, sigma);
        clamp(img.data_mut());
    }
    img
}

/// Colour jitter, grayscale and Gaussian blur on a single weak view.
pub fn strong_augment(view: &Tensor, config: &AugConfig, rng: &mut Stream) -> (Tensor, AugRecord) {
    let rec = sample_strong_record(view.shape()[0], config, rng);
    (apply_photometric(&rec, view), rec)
}

/// Sample CutMix boxes for a batch of `batch` images of side `size`. Partners
/// come from a seeded shuffle; batches of one are left alone.
pub fn sample_cutmix(batch: usize, size: usize, config: &AugConfig, rng: &mut Stream) -> Vec<Option<CutMixBox>> {
    if batch < 2 {
        return vec![None; batch];
    }
    let partners = rng::permutation(batch, rng);
    let area = (size * size) as f64;
    partners
        .into_iter()
        .map(|partner| {
            if !rng.random_bool(config.cutmix_prob) {
                return None;
            }
            let frac = rng.random_range(config.cutmix_area.0..=config.cutmix_area.1);
            let aspect = rng.random_range(config.cutmix_aspect.0..=config.cutmix_aspect.1);
            let h = ((frac * area * aspect).sqrt().round() as usize).clamp(1, size);
            let w = ((frac * area / aspect).sqrt().round() as usize).clamp(1, size);
            let y0 = rng.random_range(0..=size - h);
            let x0 = rng.random_range(0..=size - w);
            Some(CutMixBox { partner, y0, x0, h, w })
        })
        .collect()
}

/// Paste each box from its partner's *original* image, labels and
/// confidences.
pub fn apply_cutmix(
    boxes: &[Option<CutMixBox>],
    images: &mut [Tensor],
    labels: &mut [Vec<u16>],
    confidences: &mut [Vec<f64>],
) {
    let (src_img, src_lab, src_conf) = (images.to_vec(), labels.to_vec(), confidences.to_vec());
    for (i, b) in boxes.iter().enumerate() {
        let Some(b) = b else { continue };
        let n = images[i].shape()[0];
        for y in b.y0..b.y0 + b.h {
            for x in b.x0..b.x0 + b.w {
                let p = y * n + x;
                images[i].data_mut()[p * 3..p * 3 + 3]
                    .copy_from_slice(&src_img[b.partner].data()[p * 3..p * 3 + 3]);
                labels[i][p] = src_lab[b.partner][p];
                confidences[i][p] = src_conf[b.partner][p];
            }
        }
    }
}

/// Batch-level CutMix over images with their pseudo-labels and confidences.
pub fn cutmix_batch(
    images: &mut [Tensor],
    labels: &mut [Vec<u16>],
    confidences: &mut [Vec<f64>],
    config: &AugConfig,
    rng: &mut Stream,
) -> Vec<Option<CutMixBox>> {
    let size = images.first().map_or(0, |i| i.shape()[0]);
    let boxes = sample_cutmix(images.len(), size, config, rng);
    apply_cutmix(&boxes, images, labels, confidences);
    boxes
}
