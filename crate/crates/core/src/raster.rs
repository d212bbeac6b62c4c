//! In-memory images and masks plus the pixel operations shared by the
//! synthetic generator and the augmentation pipeline.

use crate::tensor::{Scalar, Tensor};

/// `[C, H, W]` float image, intensities nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// `[H, W]` class-id raster, 0 = background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "image data length");
        Image {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let hw = self.height * self.width;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn same_geometry(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width, "mask data length");
        Mask {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask::new(height, width, vec![0; height * width])
    }

    pub fn foreground_pixels(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Binary mask of pixels equal to `class`.
    pub fn binary(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }
}

/// Stack images into a `[N, C, H, W]` tensor. All images must share geometry.
pub fn images_to_tensor<F: Scalar>(images: &[&Image]) -> Tensor<F> {
    let first = images.first().expect("at least one image");
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for im in images {
        assert!(im.same_geometry(first), "images differ in geometry");
        data.extend(im.data.iter().map(|&v| F::from_f32(v).unwrap()));
    }
    Tensor::from_vec([images.len(), first.channels, first.height, first.width], data)
}

/// Flatten masks into `[N·H·W]` class ids.
pub fn masks_to_labels(masks: &[&Mask]) -> Vec<usize> {
    masks.iter().flat_map(|m| m.data.iter().map(|&v| v as usize)).collect()
}

pub fn flip_h<T: Copy>(data: &mut [T], planes: usize, h: usize, w: usize) {
    for p in 0..planes {
        for y in 0..h {
            data[(p * h + y) * w..(p * h + y + 1) * w].reverse();
        }
    }
}

pub fn flip_v<T: Copy>(data: &mut [T], planes: usize, h: usize, w: usize) {
    for p in 0..planes {
        for y in 0..h / 2 {
            for x in 0..w {
                data.swap((p * h + y) * w + x, (p * h + h - 1 - y) * w + x);
            }
        }
    }
}

/// Rotate each plane by `k` quarter turns counter-clockwise. Returns the new `(h, w)`.
pub fn rot90<T: Copy + Default>(data: &mut Vec<T>, planes: usize, h: usize, w: usize, k: u8) -> (usize, usize) {
    let mut cur_h = h;
    let mut cur_w = w;
    for _ in 0..(k % 4) {
        let mut out = vec![T::default(); data.len()];
        // (y, x) -> (w - 1 - x, y) with new shape (w, h)
        for p in 0..planes {
            for y in 0..cur_h {
                for x in 0..cur_w {
                    let ny = cur_w - 1 - x;
                    let nx = y;
                    out[(p * cur_w + ny) * cur_h + nx] = data[(p * cur_h + y) * cur_w + x];
                }
            }
        }
        *data = out;
        std::mem::swap(&mut cur_h, &mut cur_w);
    }
    (cur_h, cur_w)
}

/// Bilinear resample of the crop window `[top, top+ch) × [left, left+cw)` to `oh × ow`
/// (pixel-centre alignment, edge clamping).
#[allow(clippy::too_many_arguments)]
pub fn crop_resize_bilinear(
    src: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; planes * oh * ow];
    if ch == oh && cw == ow {
        for p in 0..planes {
            for y in 0..oh {
                let s = (p * h + top + y) * w + left;
                out[(p * oh + y) * ow..(p * oh + y + 1) * ow].copy_from_slice(&src[s..s + ow]);
            }
        }
        return out;
    }
    let sy = ch as f64 / oh as f64;
    let sx = cw as f64 / ow as f64;
    for p in 0..planes {
        for y in 0..oh {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(ch - 1);
            let ty = (fy - y0 as f64) as f32;
            for x in 0..ow {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(cw - 1);
                let tx = (fx - x0 as f64) as f32;
                let at = |yy: usize, xx: usize| src[(p * h + top + yy) * w + left + xx];
                let top_row = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bot_row = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out[(p * oh + y) * ow + x] = top_row * (1.0 - ty) + bot_row * ty;
            }
        }
    }
    out
}

/// Nearest-neighbour resample of a crop window, for label rasters.
#[allow(clippy::too_many_arguments)]
pub fn crop_resize_nearest<T: Copy + Default>(
    src: &[T],
    h: usize,
    w: usize,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    debug_assert!(top + ch <= h);
    let mut out = vec![T::default(); oh * ow];
    for y in 0..oh {
        let yy = ((y * ch) / oh).min(ch - 1);
        for x in 0..ow {
            let xx = ((x * cw) / ow).min(cw - 1);
            out[y * ow + x] = src[(top + yy) * w + left + xx];
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur of each plane with replicated borders. `sigma <= 0` is a no-op.
pub fn gaussian_blur(data: &mut [f32], planes: usize, h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0f64; h * w];
    for p in 0..planes {
        let plane = &mut data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * plane[y * w + xx] as f64;
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[yy * w + x];
                }
                plane[y * w + x] = acc as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flips_are_involutions() {
        let orig: Vec<u8> = (0..24).collect();
        let mut d = orig.clone();
        flip_h(&mut d, 2, 3, 4);
        assert_ne!(d, orig);
        flip_h(&mut d, 2, 3, 4);
        assert_eq!(d, orig);
        flip_v(&mut d, 2, 3, 4);
        flip_v(&mut d, 2, 3, 4);
        assert_eq!(d, orig);
    }

    #[test]
    fn four_quarter_turns_restore_the_plane() {
        let orig: Vec<u8> = (0..12).collect();
        let mut d = orig.clone();
        let (h, w) = rot90(&mut d, 1, 3, 4, 1);
        assert_eq!((h, w), (4, 3));
        // top-right corner moves to top-left
        assert_eq!(d[0], 3);
        let (h, w) = rot90(&mut d, 1, h, w, 3);
        assert_eq!((h, w), (3, 4));
        assert_eq!(d, orig);
    }

    #[test]
    fn blur_preserves_constants_and_range() {
        let mut d = vec![0.3f32; 64];
        gaussian_blur(&mut d, 1, 8, 8, 1.2);
        assert!(d.iter().all(|v| (v - 0.3).abs() < 1e-6));
        let mut step: Vec<f32> = (0..64).map(|i| if i % 8 < 4 { 0.0 } else { 1.0 }).collect();
        gaussian_blur(&mut step, 1, 8, 8, 1.0);
        assert!(step.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_crop_copies() {
        let src: Vec<f32> = (0..16).map(|v| v as f32).collect();
        assert_eq!(crop_resize_bilinear(&src, 1, 4, 4, 0, 0, 4, 4, 4, 4), src);
        let m: Vec<u8> = (0..16).collect();
        assert_eq!(crop_resize_nearest(&m, 4, 4, 0, 0, 4, 4, 4, 4), m);
    }
}
