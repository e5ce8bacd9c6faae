//! Box-consistent image augmentations.
//!
//! Every transform takes the sample and an explicit RNG and is otherwise pure.
//! Transforms that can fail their placement constraints return `None` and the
//! caller keeps the input.

use ndarray::{s, Array2, Array3, Zip};
use rand::{Rng, RngCore};
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;
use crate::image_ops::{flip_horizontal, resize, sample_bilinear, Image, Letterbox};

/// Words whose meaning a left-right mirror inverts.
pub const MIRROR_WORDS: [&str; 6] = ["left", "right", "leftmost", "rightmost", "lefty", "righty"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mix {
    pub partner_box: BoundingBox<f64>,
    /// Weight of the base sample.
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub image: Image,
    /// Absolute pixels of `image`.
    pub gt_box: BoundingBox<f64>,
    pub expression: String,
    pub mix: Option<Mix>,
    /// Warnings raised while augmenting (harmful transforms, mirrored spatial words).
    pub flags: Vec<String>,
    /// Optional `H×W` plane marking referent pixels. Geometric transforms warp
    /// it like the image; erasing and pasting clear it.
    pub track: Option<Array2<f32>>,
}

impl AugmentedSample {
    pub fn new(image: Image, gt_box: BoundingBox<f64>, expression: impl Into<String>) -> Self {
        Self { image, gt_box, expression: expression.into(), mix: None, flags: Vec::new(), track: None }
    }

    pub fn with_track(mut self, track: Array2<f32>) -> Self {
        assert_eq!(track.dim(), (self.height(), self.width()));
        self.track = Some(track);
        self
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    fn box_ok(&self, b: &BoundingBox<f64>) -> bool {
        b.w >= 1.0 && b.h >= 1.0 && b.inside(self.width() as f64, self.height() as f64)
    }
}

fn plane_as_image(p: &Array2<f32>) -> Image {
    let (h, w) = p.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, _)| p[[y, x]])
}

fn image_as_plane(img: &Image) -> Array2<f32> {
    img.slice(s![.., .., 0]).to_owned()
}

// ---------------------------------------------------------------- resize

/// Output side for a scale draw: `round(base × s / snap) × snap`, at least `snap`.
pub fn snapped_side(base_side: usize, scale: f64, snap: usize) -> usize {
    (((base_side as f64 * scale / snap as f64).round() as usize).max(1)) * snap
}

pub fn draw_resize_side<R: Rng + ?Sized>(base_side: usize, scale_range: (f64, f64), snap: usize, rng: &mut R) -> usize {
    let s = if scale_range.1 > scale_range.0 { rng.random_range(scale_range.0..scale_range.1) } else { scale_range.0 };
    snapped_side(base_side, s, snap)
}

/// Letterbox the sample into `side × side` (a plain resize for square inputs).
pub fn resize_to_side(sample: &AugmentedSample, side: usize) -> Option<AugmentedSample> {
    let lb = Letterbox::new(sample.width(), sample.height(), side);
    let gt_box = lb.forward_box(&sample.gt_box);
    let mut out = AugmentedSample {
        image: lb.apply(&sample.image),
        gt_box,
        expression: sample.expression.clone(),
        mix: sample.mix.map(|m| Mix { partner_box: lb.forward_box(&m.partner_box), ..m }),
        flags: sample.flags.clone(),
        track: None,
    };
    if !out.box_ok(&gt_box) {
        return None;
    }
    out.track = sample.track.as_ref().map(|t| {
        let mut canvas = Array2::zeros((side, side));
        let r = image_as_plane(&lb.apply(&plane_as_image(t)));
        // padding of the letterbox is not referent
        let (px, py) = (lb.pad_x as usize, lb.pad_y as usize);
        let nw = ((lb.orig_w as f64 * lb.scale).round() as usize).clamp(1, side);
        let nh = ((lb.orig_h as f64 * lb.scale).round() as usize).clamp(1, side);
        canvas.slice_mut(s![py..py + nh, px..px + nw]).assign(&r.slice(s![py..py + nh, px..px + nw]));
        canvas
    });
    Some(out)
}

pub fn random_resize<R: Rng + ?Sized>(
    sample: &AugmentedSample,
    base_side: usize,
    scale_range: (f64, f64),
    snap: usize,
    rng: &mut R,
) -> Option<AugmentedSample> {
    let side = draw_resize_side(base_side, scale_range, snap, rng);
    resize_to_side(sample, side)
}

// ---------------------------------------------------------------- flip / crop

pub fn mentions_mirror_words(expression: &str) -> bool {
    crate::datahub::tokenize(expression).iter().any(|t| MIRROR_WORDS.contains(&t.as_str()))
}

pub fn horizontal_flip(sample: &AugmentedSample) -> AugmentedSample {
    let w = sample.width() as f64;
    let mirror = |b: &BoundingBox<f64>| BoundingBox { cx: w - b.cx, ..*b };
    let mut flags = sample.flags.clone();
    if mentions_mirror_words(&sample.expression) {
        flags.push("horizontal_flip: expression contains left/right words".to_owned());
    }
    AugmentedSample {
        image: flip_horizontal(&sample.image),
        gt_box: mirror(&sample.gt_box),
        expression: sample.expression.clone(),
        mix: sample.mix.map(|m| Mix { partner_box: mirror(&m.partner_box), ..m }),
        flags,
        track: sample.track.as_ref().map(|t| {
            let mut f = t.clone();
            f.invert_axis(ndarray::Axis(1));
            f.as_standard_layout().into_owned()
        }),
    }
}

/// Crop a window (side fraction in `[min_scale, 1]` per axis) around the box
/// center and stretch it back to the input size. The box is clipped to the window.
pub fn random_crop<R: Rng + ?Sized>(sample: &AugmentedSample, min_scale: f64, rng: &mut R) -> Option<AugmentedSample> {
    let (w, h) = (sample.width(), sample.height());
    let cw = ((w as f64 * rng.random_range(min_scale..=1.0)).round() as usize).clamp(1, w);
    let ch = ((h as f64 * rng.random_range(min_scale..=1.0)).round() as usize).clamp(1, h);
    let (cx, cy) = (sample.gt_box.cx, sample.gt_box.cy);
    let x_lo = ((cx - cw as f64).ceil().max(0.0)) as usize;
    let x_hi = (cx.floor() as usize).min(w - cw);
    let y_lo = ((cy - ch as f64).ceil().max(0.0)) as usize;
    let y_hi = (cy.floor() as usize).min(h - ch);
    if x_lo > x_hi || y_lo > y_hi {
        return None;
    }
    let x0 = rng.random_range(x_lo..=x_hi);
    let y0 = rng.random_range(y_lo..=y_hi);
    let crop = sample.image.slice(s![y0..y0 + ch, x0..x0 + cw, ..]).to_owned();
    let (sx, sy) = (w as f64 / cw as f64, h as f64 / ch as f64);
    let map = |b: &BoundingBox<f64>| {
        b.affine(1.0, 1.0, -(x0 as f64), -(y0 as f64)).clamped(cw as f64, ch as f64).affine(sx, sy, 0.0, 0.0)
    };
    let gt_box = map(&sample.gt_box);
    let mut flags = sample.flags.clone();
    flags.push("random_crop: referent may be truncated".to_owned());
    let out = AugmentedSample {
        image: resize(&crop, w, h),
        gt_box,
        expression: sample.expression.clone(),
        mix: sample.mix.map(|m| Mix { partner_box: map(&m.partner_box), ..m }),
        flags,
        track: sample.track.as_ref().map(|t| {
            let c = t.slice(s![y0..y0 + ch, x0..x0 + cw]).to_owned();
            image_as_plane(&resize(&plane_as_image(&c), w, h))
        }),
    };
    out.box_ok(&gt_box).then_some(out)
}

// ---------------------------------------------------------------- elastic

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = k.iter().sum();
    k.into_iter().map(|v| (v / z) as f32).collect()
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(field: &Array2<f32>, sigma: f64) -> Array2<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = field.dim();
    let tmp: Array2<f32> = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter().enumerate().map(|(j, kv)| kv * field[[y, (x as i64 + j as i64 - r).clamp(0, w as i64 - 1) as usize]]).sum::<f32>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter().enumerate().map(|(j, kv)| kv * tmp[[(y as i64 + j as i64 - r).clamp(0, h as i64 - 1) as usize, x]]).sum::<f32>()
    })
}

fn sample_plane(p: &Array2<f32>, x: f32, y: f32) -> f32 {
    let (h, w) = p.dim();
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f32);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f32);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (fx - x0 as f32, fy - y0 as f32);
    let top = p[[y0, x0]] * (1.0 - ax) + p[[y0, x1]] * ax;
    let bot = p[[y1, x0]] * (1.0 - ax) + p[[y1, x1]] * ax;
    top * (1.0 - ay) + bot * ay
}

/// Displacement fields `(dx, dy)`: uniform noise in ±1, Gaussian-smoothed, scaled by `alpha`.
pub fn elastic_field<R: Rng + ?Sized>(h: usize, w: usize, alpha: f64, sigma: f64, rng: &mut R) -> (Array2<f32>, Array2<f32>) {
    let mut noise = || Array2::from_shape_simple_fn((h, w), || rng.random_range(-1.0f32..=1.0));
    let (nx, ny) = (noise(), noise());
    let a = alpha as f32;
    (gaussian_blur(&nx, sigma).mapv(|v| v * a), gaussian_blur(&ny, sigma).mapv(|v| v * a))
}

/// Output pixel `q` reads the input at `q + d(q)`. The box is re-fit to the
/// extent of the output pixels whose source point falls inside it.
pub fn elastic_transform<R: Rng + ?Sized>(sample: &AugmentedSample, alpha: f64, sigma: f64, rng: &mut R) -> Option<AugmentedSample> {
    let (h, w) = (sample.height(), sample.width());
    let (dx, dy) = elastic_field(h, w, alpha, sigma, rng);
    let mut image = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let px = sample_bilinear(&sample.image, x as f32 + 0.5 + dx[[y, x]], y as f32 + 0.5 + dy[[y, x]]);
            for c in 0..3 {
                image[[y, x, c]] = px[c];
            }
        }
    }
    let refit = |b: &BoundingBox<f64>| {
        let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..h {
            for x in 0..w {
                // same border clamp as the image sampling, so replicated edge pixels count
                let sx = (x as f64 + 0.5 + dx[[y, x]] as f64).clamp(0.5, w as f64 - 0.5);
                let sy = (y as f64 + 0.5 + dy[[y, x]] as f64).clamp(0.5, h as f64 - 0.5);
                if b.contains_point(sx, sy) {
                    lo_x = lo_x.min(x);
                    lo_y = lo_y.min(y);
                    hi_x = hi_x.max(x + 1);
                    hi_y = hi_y.max(y + 1);
                }
            }
        }
        // a referent squeezed out of every pixel center degenerates to an empty box
        if lo_x == usize::MAX {
            return BoundingBox::new(0.0, 0.0, 0.0, 0.0);
        }
        BoundingBox::from_corners(lo_x as f64, lo_y as f64, hi_x as f64, hi_y as f64)
    };
    let gt_box = refit(&sample.gt_box);
    let out = AugmentedSample {
        image,
        gt_box,
        expression: sample.expression.clone(),
        mix: sample.mix.map(|m| Mix { partner_box: refit(&m.partner_box), ..m }),
        flags: sample.flags.clone(),
        track: sample.track.as_ref().map(|t| {
            Array2::from_shape_fn((h, w), |(y, x)| sample_plane(t, x as f32 + 0.5 + dx[[y, x]], y as f32 + 0.5 + dy[[y, x]]))
        }),
    };
    out.box_ok(&gt_box).then_some(out)
}

// ---------------------------------------------------------------- photometric

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhotometricOp {
    Brightness,
    Contrast,
    Color,
    Sharpness,
    Equalize,
    Posterize,
    Solarize,
}

impl PhotometricOp {
    pub const ALL: [PhotometricOp; 7] = [
        PhotometricOp::Brightness,
        PhotometricOp::Contrast,
        PhotometricOp::Color,
        PhotometricOp::Sharpness,
        PhotometricOp::Equalize,
        PhotometricOp::Posterize,
        PhotometricOp::Solarize,
    ];
}

pub const MAX_MAGNITUDE: f64 = 10.0;

fn luma(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn blend(base: &Image, target: &Image, factor: f32) -> Image {
    let mut out = base.clone();
    Zip::from(&mut out).and(target).for_each(|o, &t| *o = (t + (*o - t) * factor).clamp(0.0, 1.0));
    out
}

fn equalize_channel(img: &Image, c: usize) -> Vec<f32> {
    let vals: Vec<u8> = img.slice(s![.., .., c]).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut hist = [0usize; 256];
    for &v in &vals {
        hist[v as usize] += 1;
    }
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (i, h) in hist.iter().enumerate() {
        acc += h;
        cdf[i] = acc;
    }
    let n = vals.len();
    let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
    if n == cdf_min {
        return img.slice(s![.., .., c]).iter().copied().collect();
    }
    vals.iter().map(|&v| (cdf[v as usize] - cdf_min) as f32 / (n - cdf_min) as f32).collect()
}

/// Apply one photometric op at `magnitude ∈ [0, 10]`. `sign` picks the
/// direction for the signed enhancement ops. Magnitude 0 is the identity.
pub fn photometric(img: &Image, op: PhotometricOp, magnitude: f64, sign: f32) -> Image {
    let m = (magnitude / MAX_MAGNITUDE).clamp(0.0, 1.0) as f32;
    if m == 0.0 {
        return img.clone();
    }
    let factor = 1.0 + sign * 0.9 * m;
    let (h, w, _) = img.dim();
    match op {
        PhotometricOp::Brightness => img.mapv(|v| (v * factor).clamp(0.0, 1.0)),
        PhotometricOp::Contrast => {
            let mut mean = 0.0;
            for y in 0..h {
                for x in 0..w {
                    mean += luma(&[img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]]);
                }
            }
            mean /= (h * w) as f32;
            blend(img, &Array3::from_elem(img.dim(), mean), factor)
        }
        PhotometricOp::Color => {
            let gray = Array3::from_shape_fn(img.dim(), |(y, x, _)| luma(&[img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]]));
            blend(img, &gray, factor)
        }
        PhotometricOp::Sharpness => {
            // 3×3 smoothing kernel (center weight 5, sum 13); border pixels kept
            let mut smooth = img.clone();
            for y in 1..h.saturating_sub(1) {
                for x in 1..w.saturating_sub(1) {
                    for c in 0..3 {
                        let mut acc = 4.0 * img[[y, x, c]];
                        for dy in 0..3 {
                            for dx in 0..3 {
                                acc += img[[y + dy - 1, x + dx - 1, c]];
                            }
                        }
                        smooth[[y, x, c]] = acc / 13.0;
                    }
                }
            }
            blend(img, &smooth, factor)
        }
        PhotometricOp::Equalize => {
            let mut eq = img.clone();
            for c in 0..3 {
                let ch = equalize_channel(img, c);
                for (dst, v) in eq.slice_mut(s![.., .., c]).iter_mut().zip(ch) {
                    *dst = v;
                }
            }
            blend(&eq, img, 1.0 - m)
        }
        PhotometricOp::Posterize => {
            let bits = 8 - (4.0 * m).round() as u32;
            if bits >= 8 {
                return img.clone();
            }
            let levels = (1u32 << bits) as f32;
            img.mapv(|v| ((v.clamp(0.0, 1.0) * 255.0) as u32 >> (8 - bits)) as f32 / (levels - 1.0))
        }
        PhotometricOp::Solarize => {
            let threshold = 1.0 - m;
            img.mapv(|v| if v > threshold { 1.0 - v } else { v })
        }
    }
}

/// `n_ops` ops drawn with replacement from the photometric pool. The box is untouched.
pub fn rand_augment<R: Rng + ?Sized>(sample: &AugmentedSample, n_ops: usize, magnitude: f64, rng: &mut R) -> AugmentedSample {
    let mut image = sample.image.clone();
    for _ in 0..n_ops {
        let op = PhotometricOp::ALL[rng.random_range(0..PhotometricOp::ALL.len())];
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        image = photometric(&image, op, magnitude, sign);
    }
    AugmentedSample { image, ..sample.clone() }
}

// ---------------------------------------------------------------- occlusion

/// Pixel rectangle `(x, y, w, h)`.
pub type Rect = (usize, usize, usize, usize);

fn rect_contains(r: Rect, px: f64, py: f64) -> bool {
    px >= r.0 as f64 && px < (r.0 + r.2) as f64 && py >= r.1 as f64 && py < (r.1 + r.3) as f64
}

/// Draw a rectangle whose area fraction lies in `area_range` and which does not
/// contain `(cx, cy)`. Up to 10 attempts.
pub fn place_rect<R: Rng + ?Sized>(w: usize, h: usize, area_range: (f64, f64), avoid: (f64, f64), rng: &mut R) -> Option<Rect> {
    let total = (w * h) as f64;
    for _ in 0..10 {
        let area = rng.random_range(area_range.0..=area_range.1) * total;
        let ratio = rng.random_range((0.3f64).ln()..=(1.0 / 0.3f64).ln()).exp();
        let rw = (area * ratio).sqrt().round() as usize;
        let rh = (area / ratio).sqrt().round() as usize;
        if rw == 0 || rh == 0 || rw > w || rh > h {
            continue;
        }
        let frac = (rw * rh) as f64 / total;
        if frac < area_range.0 || frac > area_range.1 {
            continue;
        }
        let r = (rng.random_range(0..=w - rw), rng.random_range(0..=h - rh), rw, rh);
        if rect_contains(r, avoid.0, avoid.1) {
            continue;
        }
        return Some(r);
    }
    None
}

fn clear_track(track: &mut Option<Array2<f32>>, r: Rect) {
    if let Some(t) = track {
        t.slice_mut(s![r.1..r.1 + r.3, r.0..r.0 + r.2]).fill(0.0);
    }
}

/// Fill one rectangle (not over the box center) with uniform noise.
pub fn random_erasing<R: Rng + ?Sized>(sample: &AugmentedSample, area_range: (f64, f64), rng: &mut R) -> Option<AugmentedSample> {
    let r = place_rect(sample.width(), sample.height(), area_range, (sample.gt_box.cx, sample.gt_box.cy), rng)?;
    let mut out = sample.clone();
    out.image.slice_mut(s![r.1..r.1 + r.3, r.0..r.0 + r.2, ..]).map_inplace(|v| *v = rng.random::<f32>());
    clear_track(&mut out.track, r);
    Some(out)
}

pub fn mixup_with_lambda(a: &AugmentedSample, b: &AugmentedSample, lambda: f64) -> AugmentedSample {
    assert_eq!(a.image.dim(), b.image.dim(), "mixup needs equal resolutions");
    let l = lambda as f32;
    let mut image = a.image.clone();
    Zip::from(&mut image).and(&b.image).for_each(|x, &y| *x = l * *x + (1.0 - l) * y);
    AugmentedSample { image, mix: Some(Mix { partner_box: b.gt_box, lambda }), ..a.clone() }
}

/// `λ ~ Beta(β, β)`; expression and target stay sample `a`'s.
pub fn mixup<R: Rng + ?Sized>(a: &AugmentedSample, b: &AugmentedSample, beta: f64, rng: &mut R) -> AugmentedSample {
    let lambda = Beta::new(beta, beta).expect("beta parameter > 0").sample(rng);
    mixup_with_lambda(a, b, lambda)
}

pub fn cutmix_with_rect(a: &AugmentedSample, b: &AugmentedSample, r: Rect) -> AugmentedSample {
    assert_eq!(a.image.dim(), b.image.dim(), "cutmix needs equal resolutions");
    let mut out = a.clone();
    out.image.slice_mut(s![r.1..r.1 + r.3, r.0..r.0 + r.2, ..]).assign(&b.image.slice(s![r.1..r.1 + r.3, r.0..r.0 + r.2, ..]));
    clear_track(&mut out.track, r);
    let lambda = 1.0 - (r.2 * r.3) as f64 / (a.width() * a.height()) as f64;
    out.mix = Some(Mix { partner_box: b.gt_box, lambda });
    out
}

/// Paste a patch of `b` into `a`, never over `a`'s box center.
pub fn cutmix<R: Rng + ?Sized>(a: &AugmentedSample, b: &AugmentedSample, area_range: (f64, f64), rng: &mut R) -> Option<AugmentedSample> {
    let r = place_rect(a.width(), a.height(), area_range, (a.gt_box.cx, a.gt_box.cy), rng)?;
    Some(cutmix_with_rect(a, b, r))
}

// ---------------------------------------------------------------- policy

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    RandomResize { scale_min: f64, scale_max: f64, snap: usize },
    HorizontalFlip,
    RandomCrop { min_scale: f64 },
    ElasticTransform { alpha: f64, sigma: f64 },
    RandAugment { n_ops: usize, magnitude: f64 },
    RandomErasing { area_min: f64, area_max: f64 },
    Mixup { beta: f64 },
    Cutmix { area_min: f64, area_max: f64 },
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Transform::RandomResize { .. } => "random_resize",
            Transform::HorizontalFlip => "horizontal_flip",
            Transform::RandomCrop { .. } => "random_crop",
            Transform::ElasticTransform { .. } => "elastic_transform",
            Transform::RandAugment { .. } => "rand_augment",
            Transform::RandomErasing { .. } => "random_erasing",
            Transform::Mixup { .. } => "mixup",
            Transform::Cutmix { .. } => "cutmix",
        }
    }

    pub fn default_resize() -> Self {
        Transform::RandomResize { scale_min: 0.6, scale_max: 1.4, snap: 32 }
    }

    pub fn default_elastic() -> Self {
        Transform::ElasticTransform { alpha: 120.0, sigma: 8.0 }
    }

    pub fn default_rand_augment() -> Self {
        Transform::RandAugment { n_ops: 2, magnitude: 9.0 }
    }

    pub fn default_erasing() -> Self {
        Transform::RandomErasing { area_min: 0.02, area_max: 0.2 }
    }

    pub fn default_mixup() -> Self {
        Transform::Mixup { beta: 1.5 }
    }

    pub fn default_cutmix() -> Self {
        Transform::Cutmix { area_min: 0.05, area_max: 0.3 }
    }

    /// Transforms known to damage the expression/box relation.
    pub fn is_harmful(&self) -> bool {
        matches!(self, Transform::HorizontalFlip | Transform::RandomCrop { .. })
    }

    pub fn is_mixing(&self) -> bool {
        matches!(self, Transform::Mixup { .. } | Transform::Cutmix { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyEntry {
    pub transform: Transform,
    #[serde(default = "one")]
    pub prob: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub transforms: Vec<PolicyEntry>,
    /// Must be set for flip/crop to be accepted at all.
    pub allow_harmful: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("mixup and cutmix cannot both be enabled")]
    MixingConflict,
    #[error("{name} is known to break expression/box consistency; set allow_harmful to use it")]
    Harmful { name: &'static str },
    #[error("{name}: {reason}")]
    Param { name: &'static str, reason: String },
}

impl AugmentPolicy {
    pub fn new(transforms: impl IntoIterator<Item = Transform>) -> Self {
        Self { transforms: transforms.into_iter().map(|transform| PolicyEntry { transform, prob: 1.0 }).collect(), allow_harmful: false }
    }

    /// Validate; returns warnings for accepted-but-flagged entries.
    pub fn validate(&self) -> Result<Vec<String>, AugmentError> {
        let mut warnings = Vec::new();
        let mut mixing = 0;
        for e in &self.transforms {
            let name = e.transform.name();
            let bad = |reason: &str| Err(AugmentError::Param { name, reason: reason.to_owned() });
            if !(0.0..=1.0).contains(&e.prob) {
                return bad("prob must lie in [0, 1]");
            }
            match &e.transform {
                Transform::RandomResize { scale_min, scale_max, snap } => {
                    if !(*scale_min > 0.0 && scale_max >= scale_min) || *snap == 0 {
                        return bad("need 0 < scale_min <= scale_max and snap >= 1");
                    }
                }
                Transform::RandomCrop { min_scale } if !(*min_scale > 0.0 && *min_scale <= 1.0) => {
                    return bad("min_scale must lie in (0, 1]");
                }
                Transform::ElasticTransform { alpha, sigma } if !(*alpha >= 0.0 && *sigma > 0.0) => {
                    return bad("need alpha >= 0 and sigma > 0");
                }
                Transform::RandAugment { n_ops, magnitude } if *n_ops == 0 || !(0.0..=MAX_MAGNITUDE).contains(magnitude) => {
                    return bad("need n_ops >= 1 and magnitude in [0, 10]");
                }
                Transform::RandomErasing { area_min, area_max } | Transform::Cutmix { area_min, area_max }
                    if !(*area_min > 0.0 && area_max >= area_min && *area_max < 1.0) =>
                {
                    return bad("area range must lie inside (0, 1)");
                }
                Transform::Mixup { beta } if *beta <= 0.0 => return bad("beta must be positive"),
                _ => {}
            }
            if e.transform.is_mixing() {
                mixing += 1;
            }
            if e.transform.is_harmful() {
                if !self.allow_harmful {
                    return Err(AugmentError::Harmful { name });
                }
                warnings.push(format!("{name} enabled: expression/box consistency is not guaranteed"));
            }
        }
        if mixing > 1 {
            return Err(AugmentError::MixingConflict);
        }
        Ok(warnings)
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn resize(&self) -> Option<&PolicyEntry> {
        self.transforms.iter().find(|e| matches!(e.transform, Transform::RandomResize { .. }))
    }

    /// The policy without its resize entry (applied batch-wide by the trainer).
    pub fn without_resize(&self) -> Self {
        Self {
            transforms: self.transforms.iter().filter(|e| !matches!(e.transform, Transform::RandomResize { .. })).cloned().collect(),
            allow_harmful: self.allow_harmful,
        }
    }

    pub fn needs_partner(&self) -> bool {
        self.transforms.iter().any(|e| e.transform.is_mixing())
    }
}

/// Apply `policy` in declared order. Each entry draws its fire decision from
/// `rng` first, whatever its probability. Mixing entries use `partner` and are
/// skipped without one.
pub fn apply_policy(
    sample: &AugmentedSample,
    policy: &AugmentPolicy,
    partner: Option<&AugmentedSample>,
    base_side: usize,
    rng: &mut dyn RngCore,
) -> AugmentedSample {
    let mut cur = sample.clone();
    for e in &policy.transforms {
        let fire = rng.random::<f64>() < e.prob;
        if !fire {
            continue;
        }
        let next = match &e.transform {
            Transform::RandomResize { scale_min, scale_max, snap } => random_resize(&cur, base_side, (*scale_min, *scale_max), *snap, rng),
            Transform::HorizontalFlip => Some(horizontal_flip(&cur)),
            Transform::RandomCrop { min_scale } => random_crop(&cur, *min_scale, rng),
            Transform::ElasticTransform { alpha, sigma } => elastic_transform(&cur, *alpha, *sigma, rng),
            Transform::RandAugment { n_ops, magnitude } => Some(rand_augment(&cur, *n_ops, *magnitude, rng)),
            Transform::RandomErasing { area_min, area_max } => random_erasing(&cur, (*area_min, *area_max), rng),
            Transform::Mixup { beta } => partner.filter(|p| p.image.dim() == cur.image.dim()).map(|p| mixup(&cur, p, *beta, rng)),
            Transform::Cutmix { area_min, area_max } => {
                partner.filter(|p| p.image.dim() == cur.image.dim()).and_then(|p| cutmix(&cur, p, (*area_min, *area_max), rng))
            }
        };
        if let Some(mut n) = next {
            if e.transform.is_harmful() && !n.flags.iter().any(|f| f.starts_with(e.transform.name())) {
                n.flags.push(format!("{} applied", e.transform.name()));
            }
            cur = n;
        }
    }
    cur
}

/// Fraction of tracked referent pixels (`track > 0.5`) whose centers fall inside the box.
pub fn track_coverage(sample: &AugmentedSample) -> Option<f64> {
    let t = sample.track.as_ref()?;
    let (mut inside, mut total) = (0usize, 0usize);
    for ((y, x), &v) in t.indexed_iter() {
        if v > 0.5 {
            total += 1;
            if sample.gt_box.contains_point(x as f64 + 0.5, y as f64 + 0.5) {
                inside += 1;
            }
        }
    }
    (total > 0).then(|| inside as f64 / total as f64)
}
