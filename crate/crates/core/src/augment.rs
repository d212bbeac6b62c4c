//! Image-level weak and strong perturbations with replayable traces.
//!
//! Weak ops are geometric (flips, quarter turns, crop-and-resize) and move the
//! mask with the image. Strong ops are photometric plus CutMix and never touch
//! geometry, so all three views of a sample stay pixel-aligned.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, Image, Mask};
use crate::rng::{rng_from, tag, Rng};

/// Axis-aligned box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CutBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// CutMix provenance of one strong view: the box was pasted from the weak view
/// of batch sample `partner`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewMix {
    pub partner: usize,
    pub cut: CutBox,
}

/// One applied operation with its realized parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentOp {
    FlipH,
    FlipV,
    Rot90 { k: u8 },
    CropResize { window: CutBox, out_height: usize, out_width: usize },
    Brightness { delta: f32 },
    Contrast { factor: f32 },
    Gamma { gamma: f32 },
    GaussBlur { sigma: f32 },
    GaussNoise { sigma: f32, seed: u64 },
    CutMix { cut: CutBox },
}

impl AugmentOp {
    pub fn is_geometric(&self) -> bool {
        matches!(
            self,
            AugmentOp::FlipH | AugmentOp::FlipV | AugmentOp::Rot90 { .. } | AugmentOp::CropResize { .. }
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentTrace {
    pub ops: Vec<AugmentOp>,
}

impl AugmentTrace {
    pub fn cutmix(&self) -> Option<CutBox> {
        self.ops.iter().find_map(|op| match op {
            AugmentOp::CutMix { cut } => Some(*cut),
            _ => None,
        })
    }
}

fn default_half() -> f64 {
    0.5
}
fn default_crop_scale() -> [f64; 2] {
    [0.8, 1.0]
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakConfig {
    #[serde(default = "default_half")]
    pub flip_p: f64,
    /// Random quarter turns (half turns only for non-square inputs).
    #[serde(default = "default_true")]
    pub rotate: bool,
    /// Output size `[h, w]`; defaults to the input size.
    #[serde(default)]
    pub crop_size: Option<[usize; 2]>,
    /// The crop window spans `scale · crop_size` before resizing back up.
    #[serde(default = "default_crop_scale")]
    pub crop_scale: [f64; 2],
}

impl Default for WeakConfig {
    fn default() -> Self {
        WeakConfig {
            flip_p: 0.5,
            rotate: true,
            crop_size: None,
            crop_scale: default_crop_scale(),
        }
    }
}

fn default_brightness() -> f64 {
    0.25
}
fn default_factor_range() -> [f64; 2] {
    [0.75, 1.25]
}
fn default_blur() -> [f64; 2] {
    [0.0, 1.5]
}
fn default_noise() -> f64 {
    0.05
}
fn default_cutmix_area() -> [f64; 2] {
    [0.02, 0.4]
}
fn default_cutmix_aspect() -> [f64; 2] {
    [0.3, 1.0 / 0.3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongConfig {
    /// Activation probability of every strong op, CutMix included.
    #[serde(default = "default_half")]
    pub p: f64,
    #[serde(default = "default_brightness")]
    pub brightness: f64,
    #[serde(default = "default_factor_range")]
    pub contrast: [f64; 2],
    #[serde(default = "default_factor_range")]
    pub gamma: [f64; 2],
    #[serde(default = "default_blur")]
    pub blur_sigma: [f64; 2],
    #[serde(default = "default_noise")]
    pub noise_sigma_max: f64,
    #[serde(default = "default_true")]
    pub cutmix: bool,
    /// Box area as a fraction of the image.
    #[serde(default = "default_cutmix_area")]
    pub cutmix_area: [f64; 2],
    /// Box aspect ratio `h / w`, drawn log-uniformly.
    #[serde(default = "default_cutmix_aspect")]
    pub cutmix_aspect: [f64; 2],
}

impl Default for StrongConfig {
    fn default() -> Self {
        StrongConfig {
            p: 0.5,
            brightness: default_brightness(),
            contrast: default_factor_range(),
            gamma: default_factor_range(),
            blur_sigma: default_blur(),
            noise_sigma_max: default_noise(),
            cutmix: true,
            cutmix_area: default_cutmix_area(),
            cutmix_aspect: default_cutmix_aspect(),
        }
    }
}

/// Config section `augment`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default)]
    pub weak: WeakConfig,
    #[serde(default)]
    pub strong: StrongConfig,
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("augment {name} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0] <= r[1] && r[0] >= lo && r[1] <= hi) {
        return Err(Error::config(format!(
            "augment {name} range {r:?} must be ordered within [{lo}, {hi}]"
        )));
    }
    Ok(())
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        check_prob("weak.flip_p", self.weak.flip_p)?;
        check_range("weak.crop_scale", self.weak.crop_scale, f64::MIN_POSITIVE, 1.0)?;
        if let Some([h, w]) = self.weak.crop_size {
            if h == 0 || w == 0 {
                return Err(Error::config("augment weak.crop_size must be positive"));
            }
        }
        let s = &self.strong;
        check_prob("strong.p", s.p)?;
        check_prob("strong.brightness", s.brightness)?;
        check_range("strong.contrast", s.contrast, 0.0, f64::INFINITY)?;
        check_range("strong.gamma", s.gamma, f64::MIN_POSITIVE, f64::INFINITY)?;
        check_range("strong.blur_sigma", s.blur_sigma, 0.0, f64::INFINITY)?;
        if !(s.noise_sigma_max >= 0.0) {
            return Err(Error::config("augment strong.noise_sigma_max must be >= 0"));
        }
        check_range("strong.cutmix_area", s.cutmix_area, 0.0, 1.0)?;
        check_range("strong.cutmix_aspect", s.cutmix_aspect, f64::MIN_POSITIVE, f64::INFINITY)?;
        Ok(())
    }

    /// Every op disabled: views equal their inputs.
    pub fn identity() -> Self {
        AugmentConfig {
            weak: WeakConfig {
                flip_p: 0.0,
                rotate: false,
                crop_size: None,
                crop_scale: [1.0, 1.0],
            },
            strong: StrongConfig {
                p: 0.0,
                ..StrongConfig::default()
            },
        }
    }
}

fn apply_geometric(op: &AugmentOp, image: &mut Image, mask: Option<&mut Mask>) -> Result<()> {
    let (c, h, w) = (image.channels, image.height, image.width);
    match *op {
        AugmentOp::FlipH => {
            raster::flip_h(&mut image.data, c, h, w);
            if let Some(m) = mask {
                raster::flip_h(&mut m.data, 1, h, w);
            }
        }
        AugmentOp::FlipV => {
            raster::flip_v(&mut image.data, c, h, w);
            if let Some(m) = mask {
                raster::flip_v(&mut m.data, 1, h, w);
            }
        }
        AugmentOp::Rot90 { k } => {
            let (nh, nw) = raster::rot90(&mut image.data, c, h, w, k);
            image.height = nh;
            image.width = nw;
            if let Some(m) = mask {
                raster::rot90(&mut m.data, 1, h, w, k);
                m.height = nh;
                m.width = nw;
            }
        }
        AugmentOp::CropResize {
            window,
            out_height,
            out_width,
        } => {
            if window.top + window.height > h || window.left + window.width > w || window.area() == 0 {
                return Err(Error::config(format!("crop window {window:?} exceeds image {h}x{w}")));
            }
            image.data = raster::crop_resize_bilinear(
                &image.data,
                c,
                h,
                w,
                window.top,
                window.left,
                window.height,
                window.width,
                out_height,
                out_width,
            );
            image.height = out_height;
            image.width = out_width;
            if let Some(m) = mask {
                m.data = raster::crop_resize_nearest(
                    &m.data,
                    h,
                    w,
                    window.top,
                    window.left,
                    window.height,
                    window.width,
                    out_height,
                    out_width,
                );
                m.height = out_height;
                m.width = out_width;
            }
        }
        _ => return Err(Error::internal("photometric op routed to geometric path")),
    }
    Ok(())
}

fn apply_photometric(op: &AugmentOp, image: &mut Image, partner: Option<&Image>) -> Result<()> {
    match *op {
        AugmentOp::Brightness { delta } => image.data.iter_mut().for_each(|v| *v += delta),
        AugmentOp::Contrast { factor } => {
            let mean = image.data.iter().map(|&v| v as f64).sum::<f64>() / image.data.len() as f64;
            let mean = mean as f32;
            image.data.iter_mut().for_each(|v| *v = (*v - mean) * factor + mean);
        }
        AugmentOp::Gamma { gamma } => image.data.iter_mut().for_each(|v| *v = v.max(0.0).powf(gamma)),
        AugmentOp::GaussBlur { sigma } => {
            raster::gaussian_blur(&mut image.data, image.channels, image.height, image.width, sigma as f64)
        }
        AugmentOp::GaussNoise { sigma, seed } => {
            if sigma > 0.0 {
                let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
                let mut rng = rng_from(seed, &[]);
                image.data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            }
        }
        AugmentOp::CutMix { cut } => {
            let p = partner.ok_or_else(|| Error::config("cutmix replay needs the partner image"))?;
            if !p.same_geometry(image) {
                return Err(Error::data("cutmix partner geometry differs"));
            }
            let (h, w) = (image.height, image.width);
            for c in 0..image.channels {
                for y in cut.top..cut.top + cut.height {
                    let row = (c * h + y) * w;
                    image.data[row + cut.left..row + cut.left + cut.width]
                        .copy_from_slice(&p.data[row + cut.left..row + cut.left + cut.width]);
                }
            }
        }
        _ => return Err(Error::internal("geometric op routed to photometric path")),
    }
    image.clamp_unit();
    Ok(())
}

/// Re-apply a trace. Geometric ops transform `mask` too; `partner` is required
/// when the trace contains CutMix.
pub fn replay(
    trace: &AugmentTrace,
    image: &Image,
    mask: Option<&Mask>,
    partner: Option<&Image>,
) -> Result<(Image, Option<Mask>)> {
    let mut out = image.clone();
    let mut m = mask.cloned();
    for op in &trace.ops {
        if op.is_geometric() {
            apply_geometric(op, &mut out, m.as_mut())?;
        } else {
            apply_photometric(op, &mut out, partner)?;
        }
    }
    Ok((out, m))
}

fn draw_weak(cfg: &WeakConfig, h: usize, w: usize, rng: &mut Rng) -> Result<AugmentTrace> {
    let [oh, ow] = cfg.crop_size.unwrap_or([h, w]);
    let mut ops = Vec::new();
    if rng.random_bool(cfg.flip_p) {
        ops.push(AugmentOp::FlipH);
    }
    if rng.random_bool(cfg.flip_p) {
        ops.push(AugmentOp::FlipV);
    }
    let (mut rh, mut rw) = (h, w);
    if cfg.rotate {
        let k = if h == w {
            rng.random_range(0..4u8)
        } else {
            2 * rng.random_range(0..2u8)
        };
        if k != 0 {
            ops.push(AugmentOp::Rot90 { k });
            if k % 2 == 1 {
                std::mem::swap(&mut rh, &mut rw);
            }
        }
    }
    if oh > rh || ow > rw {
        return Err(Error::config(format!("crop size {oh}x{ow} larger than image {rh}x{rw}")));
    }
    let scale = if cfg.crop_scale[0] < cfg.crop_scale[1] {
        rng.random_range(cfg.crop_scale[0]..=cfg.crop_scale[1])
    } else {
        cfg.crop_scale[0]
    };
    let wh = ((oh as f64 * scale).round() as usize).clamp(1, oh);
    let ww = ((ow as f64 * scale).round() as usize).clamp(1, ow);
    let top = rng.random_range(0..=rh - wh);
    let left = rng.random_range(0..=rw - ww);
    let window = CutBox {
        top,
        left,
        height: wh,
        width: ww,
    };
    let identity = top == 0 && left == 0 && (wh, ww) == (rh, rw) && (oh, ow) == (rh, rw);
    if !identity {
        ops.push(AugmentOp::CropResize {
            window,
            out_height: oh,
            out_width: ow,
        });
    }
    Ok(AugmentTrace { ops })
}

/// Weak augmentation of an image and, when given, its mask.
pub fn weak_augment(
    image: &Image,
    mask: Option<&Mask>,
    cfg: &WeakConfig,
    rng: &mut Rng,
) -> Result<(Image, Option<Mask>, AugmentTrace)> {
    let trace = draw_weak(cfg, image.height, image.width, rng)?;
    let (img, m) = replay(&trace, image, mask, None)?;
    Ok((img, m, trace))
}

fn uniform(rng: &mut Rng, r: [f64; 2]) -> f64 {
    if r[0] < r[1] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

/// Sample a CutMix box covering `area` of an `h × w` image.
pub fn sample_cut_box(cfg: &StrongConfig, h: usize, w: usize, rng: &mut Rng) -> CutBox {
    let area = uniform(rng, cfg.cutmix_area) * (h * w) as f64;
    let log_aspect = uniform(rng, [cfg.cutmix_aspect[0].ln(), cfg.cutmix_aspect[1].ln()]);
    let aspect = log_aspect.exp();
    let bh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let bw = ((area / aspect).sqrt().round() as usize).clamp(1, w);
    CutBox {
        top: rng.random_range(0..=h - bh),
        left: rng.random_range(0..=w - bw),
        height: bh,
        width: bw,
    }
}

fn draw_strong(cfg: &StrongConfig, h: usize, w: usize, with_partner: bool, rng: &mut Rng) -> AugmentTrace {
    let mut ops = Vec::new();
    let p = cfg.p;
    if rng.random_bool(p) {
        let delta = rng.random_range(-cfg.brightness..=cfg.brightness) as f32;
        ops.push(AugmentOp::Brightness { delta });
    }
    if rng.random_bool(p) {
        ops.push(AugmentOp::Contrast {
            factor: uniform(rng, cfg.contrast) as f32,
        });
    }
    if rng.random_bool(p) {
        ops.push(AugmentOp::Gamma {
            gamma: uniform(rng, cfg.gamma) as f32,
        });
    }
    if rng.random_bool(p) {
        ops.push(AugmentOp::GaussBlur {
            sigma: uniform(rng, cfg.blur_sigma) as f32,
        });
    }
    if rng.random_bool(p) {
        let sigma = rng.random_range(0.0..=cfg.noise_sigma_max) as f32;
        ops.push(AugmentOp::GaussNoise { sigma, seed: rng.random() });
    }
    if with_partner && cfg.cutmix && rng.random_bool(p) {
        ops.push(AugmentOp::CutMix {
            cut: sample_cut_box(cfg, h, w, rng),
        });
    }
    AugmentTrace { ops }
}

/// Strong augmentation of an already weakly augmented image. CutMix is only
/// considered when a partner is supplied.
pub fn strong_augment(
    image: &Image,
    partner: Option<&Image>,
    cfg: &StrongConfig,
    rng: &mut Rng,
) -> Result<(Image, AugmentTrace)> {
    let trace = draw_strong(cfg, image.height, image.width, partner.is_some(), rng);
    let (img, _) = replay(&trace, image, None, partner)?;
    Ok((img, trace))
}

/// Three views of one unlabeled image, without CutMix.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledViews {
    pub weak: Image,
    pub strong1: Image,
    pub strong2: Image,
    pub traces: [AugmentTrace; 3],
}

pub fn make_unlabeled_views(image: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> Result<UnlabeledViews> {
    let (weak, _, tw) = weak_augment(image, None, &cfg.weak, rng)?;
    let (strong1, t1) = strong_augment(&weak, None, &cfg.strong, rng)?;
    let (strong2, t2) = strong_augment(&weak, None, &cfg.strong, rng)?;
    Ok(UnlabeledViews {
        weak,
        strong1,
        strong2,
        traces: [tw, t1, t2],
    })
}

/// Views for an unlabeled batch. Strong views may CutMix with the weak view of
/// sample `(i + 1) % B`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchViews {
    pub weak: Vec<Image>,
    pub strong1: Vec<Image>,
    pub strong2: Vec<Image>,
    pub mix_s1: Vec<Option<ViewMix>>,
    pub mix_s2: Vec<Option<ViewMix>>,
    pub traces: Vec<[AugmentTrace; 3]>,
}

pub fn make_batch_views(images: &[&Image], cfg: &AugmentConfig, seed: u64, step: u64) -> Result<BatchViews> {
    let b = images.len();
    let rng_for = |i: usize, k: u64| rng_from(seed, &[tag::AUG_UNLABELED, step, i as u64, k]);
    let mut weak = Vec::with_capacity(b);
    let mut weak_traces = Vec::with_capacity(b);
    for (i, im) in images.iter().enumerate() {
        let (w, _, t) = weak_augment(im, None, &cfg.weak, &mut rng_for(i, 0))?;
        weak.push(w);
        weak_traces.push(t);
    }
    let mut out = BatchViews {
        weak: Vec::new(),
        strong1: Vec::with_capacity(b),
        strong2: Vec::with_capacity(b),
        mix_s1: Vec::with_capacity(b),
        mix_s2: Vec::with_capacity(b),
        traces: Vec::with_capacity(b),
    };
    for (i, tw) in weak_traces.into_iter().enumerate() {
        let partner_idx = (i + 1) % b;
        let partner = (b > 1).then(|| &weak[partner_idx]);
        let (s1, t1) = strong_augment(&weak[i], partner, &cfg.strong, &mut rng_for(i, 1))?;
        let (s2, t2) = strong_augment(&weak[i], partner, &cfg.strong, &mut rng_for(i, 2))?;
        let mix = |t: &AugmentTrace| {
            t.cutmix().map(|cut| ViewMix {
                partner: partner_idx,
                cut,
            })
        };
        out.mix_s1.push(mix(&t1));
        out.mix_s2.push(mix(&t2));
        out.strong1.push(s1);
        out.strong2.push(s2);
        out.traces.push([tw, t1, t2]);
    }
    out.weak = weak;
    Ok(out)
}

/// Weak augmentation of a labeled batch, seeded per step and sample.
pub fn augment_labeled_batch(
    samples: &[(&Image, &Mask)],
    cfg: &AugmentConfig,
    seed: u64,
    step: u64,
) -> Result<Vec<(Image, Mask, AugmentTrace)>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, (im, m))| {
            let mut rng = rng_from(seed, &[tag::AUG_LABELED, step, i as u64]);
            let (img, mask, t) = weak_augment(im, Some(m), &cfg.weak, &mut rng)?;
            Ok((img, mask.expect("mask passed through"), t))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::new(1, h, w, (0..h * w).map(|i| i as f32 / (h * w) as f32).collect())
    }

    #[test]
    fn identity_config_leaves_views_unchanged() {
        let x = ramp(8, 8);
        let v = make_unlabeled_views(&x, &AugmentConfig::identity(), &mut rng_from(1, &[])).unwrap();
        assert_eq!(v.weak, x);
        assert_eq!(v.strong1, x);
        assert_eq!(v.strong2, x);
        assert!(v.traces.iter().all(|t| t.ops.is_empty()));
    }

    #[test]
    fn flip_trace_twice_restores() {
        let x = ramp(6, 5);
        let t = AugmentTrace { ops: vec![AugmentOp::FlipH] };
        let (once, _) = replay(&t, &x, None, None).unwrap();
        assert_ne!(once, x);
        let (twice, _) = replay(&t, &once, None, None).unwrap();
        assert_eq!(twice, x);
    }

    #[test]
    fn crop_larger_than_image_is_config_error() {
        let cfg = WeakConfig {
            crop_size: Some([16, 16]),
            ..WeakConfig::default()
        };
        let r = weak_augment(&ramp(8, 8), None, &cfg, &mut rng_from(0, &[]));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn cutmix_box_respects_bounds() {
        let cfg = StrongConfig::default();
        let mut rng = rng_from(3, &[]);
        for _ in 0..500 {
            let b = sample_cut_box(&cfg, 32, 24, &mut rng);
            assert!(b.top + b.height <= 32 && b.left + b.width <= 24);
            assert!(b.area() >= 1);
        }
    }

    #[test]
    fn cutmix_copies_partner_pixels() {
        let x = Image::filled(1, 4, 4, 0.2);
        let p = Image::filled(1, 4, 4, 0.9);
        let cut = CutBox { top: 1, left: 2, height: 2, width: 2 };
        let (y, _) = replay(&AugmentTrace { ops: vec![AugmentOp::CutMix { cut }] }, &x, None, Some(&p)).unwrap();
        for yy in 0..4 {
            for xx in 0..4 {
                let want = if cut.contains(yy, xx) { 0.9 } else { 0.2 };
                assert_eq!(y.data[yy * 4 + xx], want);
            }
        }
    }
}
