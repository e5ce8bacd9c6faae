//! RGB images as `H×W×3` arrays of unit-scaled `f32`, plus the resize,
//! letterbox and sampling helpers the augmentations and the model input share.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{Array3, Array4};

use crate::geometry::BoundingBox;
use crate::Real;

pub type Image = Array3<f32>;

/// Padding value used by letterboxing.
pub const PAD_VALUE: f32 = 0.5;

pub fn load_rgb(path: &Path) -> image::ImageResult<Image> {
    let img = image::open(path)?.to_rgb32f();
    Ok(from_buffer(img))
}

pub fn save_rgb(img: &Image, path: &Path) -> image::ImageResult<()> {
    let (h, w, _) = img.dim();
    let bytes: Vec<u8> = img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, bytes).expect("buffer size");
    buf.save(path)
}

fn from_buffer(buf: ImageBuffer<Rgb<f32>, Vec<f32>>) -> Image {
    let (w, h) = buf.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), buf.into_raw()).expect("rgb layout")
}

fn to_buffer(img: &Image) -> ImageBuffer<Rgb<f32>, Vec<f32>> {
    let (h, w, _) = img.dim();
    let data = img.as_standard_layout().iter().copied().collect();
    ImageBuffer::from_raw(w as u32, h as u32, data).expect("rgb layout")
}

/// Bilinear (triangle filter) resize.
pub fn resize(img: &Image, width: usize, height: usize) -> Image {
    let (h, w, _) = img.dim();
    if h == height && w == width {
        return img.clone();
    }
    let out = image::imageops::resize(&to_buffer(img), width as u32, height as u32, image::imageops::FilterType::Triangle);
    from_buffer(out)
}

/// Mirror left-right.
pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().into_owned()
}

/// Bilinear sample at continuous pixel coordinates (pixel centers at `i + 0.5`),
/// clamping to the border.
pub fn sample_bilinear(img: &Image, x: f32, y: f32) -> [f32; 3] {
    let (h, w, _) = img.dim();
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f32);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f32);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (fx - x0 as f32, fy - y0 as f32);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = img[[y0, x0, c]] * (1.0 - ax) + img[[y0, x1, c]] * ax;
        let bot = img[[y1, x0, c]] * (1.0 - ax) + img[[y1, x1, c]] * ax;
        *o = top * (1.0 - ay) + bot * ay;
    }
    out
}

/// Aspect-preserving resize into a `side × side` canvas, centered, padded with
/// [`PAD_VALUE`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub orig_w: usize,
    pub orig_h: usize,
    pub side: usize,
}

impl Letterbox {
    pub fn new(orig_w: usize, orig_h: usize, side: usize) -> Self {
        let scale = side as f64 / orig_w.max(orig_h) as f64;
        let new_w = ((orig_w as f64 * scale).round() as usize).clamp(1, side);
        let new_h = ((orig_h as f64 * scale).round() as usize).clamp(1, side);
        let pad_x = ((side - new_w) / 2) as f64;
        let pad_y = ((side - new_h) / 2) as f64;
        Self { scale, pad_x, pad_y, orig_w, orig_h, side }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let new_w = ((self.orig_w as f64 * self.scale).round() as usize).clamp(1, self.side);
        let new_h = ((self.orig_h as f64 * self.scale).round() as usize).clamp(1, self.side);
        let resized = resize(img, new_w, new_h);
        let mut canvas = Array3::from_elem((self.side, self.side, 3), PAD_VALUE);
        let (px, py) = (self.pad_x as usize, self.pad_y as usize);
        canvas.slice_mut(ndarray::s![py..py + new_h, px..px + new_w, ..]).assign(&resized);
        canvas
    }

    pub fn forward_box<T: Real>(&self, b: &BoundingBox<T>) -> BoundingBox<T> {
        let s = T::lit(self.scale);
        b.affine(s, s, T::lit(self.pad_x), T::lit(self.pad_y))
    }

    /// Map a box from the canvas back into original image pixels, clamped.
    pub fn inverse_box<T: Real>(&self, b: &BoundingBox<T>) -> BoundingBox<T> {
        let inv = T::lit(1.0 / self.scale);
        let shifted = b.affine(T::one(), T::one(), T::lit(-self.pad_x), T::lit(-self.pad_y));
        shifted.affine(inv, inv, T::zero(), T::zero()).clamped(T::lit(self.orig_w as f64), T::lit(self.orig_h as f64))
    }
}

/// Stack `H×W×3` images into an `N×3×H×W` batch tensor.
pub fn to_nchw<T: Real>(images: &[&Image]) -> Array4<T> {
    let (h, w, _) = images[0].dim();
    let mut out = Array4::<T>::zeros((images.len(), 3, h, w));
    for (n, img) in images.iter().enumerate() {
        assert_eq!(img.dim(), (h, w, 3), "batch images must share a resolution");
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[n, c, y, x]] = T::lit(img[[y, x, c]] as f64);
                }
            }
        }
    }
    out
}
