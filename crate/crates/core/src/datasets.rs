//! Synthetic data, folder ingestion, labeled/unlabeled splits and batch schedules.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{gaussian_blur, Image, Mask};
use crate::rng::{rng_from, tag, Rng};

/// One image with an optional mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image: Image,
    pub mask: Option<Mask>,
    pub labeled: bool,
}

impl SampleRecord {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.labeled && self.mask.is_none() {
            return Err(Error::data(format!("{}: labeled sample without mask", self.id)));
        }
        if let Some(m) = &self.mask {
            if m.height != self.image.height || m.width != self.image.width {
                return Err(Error::data(format!(
                    "{}: image {}x{} but mask {}x{}",
                    self.id, self.image.height, self.image.width, m.height, m.width
                )));
            }
            if m.max_class() as usize >= num_classes {
                return Err(Error::data(format!(
                    "{}: class id {} >= num_classes {}",
                    self.id,
                    m.max_class(),
                    num_classes
                )));
            }
        }
        Ok(())
    }
}

fn default_shapes() -> [usize; 2] {
    [1, 3]
}
fn default_radius() -> [f64; 2] {
    [0.08, 0.22]
}
fn default_background() -> [f64; 2] {
    [0.2, 0.5]
}
fn default_offset() -> [f64; 2] {
    [0.15, 0.4]
}
fn default_true() -> bool {
    true
}

/// Parameters of the synthetic shape dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Inclusive range of labeled shapes per image.
    #[serde(default = "default_shapes")]
    pub shapes: [usize; 2],
    /// Inclusive range of unlabeled distractor shapes per image.
    #[serde(default)]
    pub distractors: [usize; 2],
    /// Shape radius range as a fraction of `min(height, width)`.
    #[serde(default = "default_radius")]
    pub radius: [f64; 2],
    #[serde(default = "default_background")]
    pub background: [f64; 2],
    /// Magnitude range of the per-shape intensity offset.
    #[serde(default = "default_offset")]
    pub offset: [f64; 2],
    /// Distractors are always darker than the background when true; otherwise the sign is random.
    #[serde(default)]
    pub negative_offsets: bool,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub blur_sigma: f64,
    /// Round intensities to 8-bit levels so a PNG round trip is lossless.
    #[serde(default = "default_true")]
    pub quantize: bool,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(count: usize, height: usize, width: usize, num_classes: usize, seed: u64) -> Self {
        SynthSpec {
            count,
            height,
            width,
            num_classes,
            shapes: default_shapes(),
            distractors: [0, 0],
            radius: default_radius(),
            background: default_background(),
            offset: default_offset(),
            negative_offsets: false,
            noise_sigma: 0.05,
            blur_sigma: 0.8,
            quantize: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.height < 4 || self.width < 4 {
            return Err(Error::config(format!(
                "synth image size {}x{} is too small (min 4x4)",
                self.height, self.width
            )));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::config("synth num_classes must be in [2, 256]"));
        }
        if self.shapes[0] == 0 || self.shapes[0] > self.shapes[1] {
            return Err(Error::config("synth shapes range must satisfy 1 <= min <= max"));
        }
        if self.distractors[0] > self.distractors[1] {
            return Err(Error::config("synth distractors range must satisfy min <= max"));
        }
        if !range_ok(self.radius) || self.radius[0] <= 0.0 || self.radius[1] > 1.0 {
            return Err(Error::config("synth radius range must lie in (0, 1]"));
        }
        for (name, r) in [("background", self.background), ("offset", self.offset)] {
            if !range_ok(r) || r[0] < 0.0 || r[1] > 1.0 {
                return Err(Error::config(format!("synth {name} range must lie in [0, 1]")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.blur_sigma >= 0.0) {
            return Err(Error::config("synth noise_sigma and blur_sigma must be >= 0"));
        }
        Ok(())
    }
}

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Polygon { vertices: Vec<(f64, f64)> },
}

impl Shape {
    fn random(rng: &mut Rng, spec: &SynthSpec) -> Shape {
        let side = spec.height.min(spec.width) as f64;
        let r = rng.random_range(spec.radius[0]..=spec.radius[1]) * side;
        let r = r.max(1.0);
        let cy = rng.random_range(0.0..spec.height as f64);
        let cx = rng.random_range(0.0..spec.width as f64);
        if rng.random_bool(0.5) {
            let aspect = rng.random_range(0.5..=1.0);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            Shape::Ellipse { cy, cx, ry: r * aspect, rx: r, angle }
        } else {
            let k = rng.random_range(3..=6usize);
            let mut angles: Vec<f64> = (0..k)
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            angles.sort_by(f64::total_cmp);
            let vertices = angles
                .into_iter()
                .map(|a| {
                    let rr = r * rng.random_range(0.6..=1.0);
                    (cy + rr * a.sin(), cx + rr * a.cos())
                })
                .collect();
            Shape::Polygon { vertices }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let dy = y - cy;
                let dx = x - cx;
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon { vertices } => {
                // even-odd ray casting
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let (yi, xi) = vertices[i];
                    let (yj, xj) = vertices[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    fn paint(&self, h: usize, w: usize, mut f: impl FnMut(usize)) {
        for y in 0..h {
            for x in 0..w {
                if self.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    f(y * w + x);
                }
            }
        }
    }
}

/// Clean (pre-blur, pre-noise) rasterization of sample `index`, plus the rng
/// positioned for the noise stage.
fn rasterize(spec: &SynthSpec, index: usize) -> (Vec<f32>, Mask, Rng) {
    let (h, w) = (spec.height, spec.width);
    let mut rng = rng_from(spec.seed, &[tag::SYNTH, index as u64]);
    loop {
        let bg = rng.random_range(spec.background[0]..=spec.background[1]);
        let mut img = vec![bg; h * w];
        let mut mask = Mask::zeros(h, w);
        let n_distract = rng.random_range(spec.distractors[0]..=spec.distractors[1]);
        for _ in 0..n_distract {
            let shape = Shape::random(&mut rng, spec);
            let mag = rng.random_range(spec.offset[0]..=spec.offset[1]);
            let off = if spec.negative_offsets || rng.random_bool(0.5) { -mag } else { mag };
            shape.paint(h, w, |p| img[p] = (bg + off).clamp(0.0, 1.0));
        }
        let n_shapes = rng.random_range(spec.shapes[0]..=spec.shapes[1]);
        for _ in 0..n_shapes {
            let shape = Shape::random(&mut rng, spec);
            let class = rng.random_range(1..spec.num_classes) as u8;
            // classes get progressively brighter offsets so they stay separable
            let mag = rng.random_range(spec.offset[0]..=spec.offset[1]) * class as f64
                / (spec.num_classes - 1) as f64;
            let value = (bg + mag).clamp(0.0, 1.0);
            shape.paint(h, w, |p| {
                img[p] = value;
                mask.data[p] = class;
            });
        }
        if mask.foreground_pixels() > 0 {
            return (img.into_iter().map(|v| v as f32).collect(), mask, rng);
        }
    }
}

fn quantize8(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
}

/// Blurred clean image for sample `index`, before noise and quantization.
pub fn synth_clean(spec: &SynthSpec, index: usize) -> (Image, Mask) {
    let (mut data, mask, _) = rasterize(spec, index);
    gaussian_blur(&mut data, 1, spec.height, spec.width, spec.blur_sigma);
    (Image::new(1, spec.height, spec.width, data), mask)
}

fn synth_one(spec: &SynthSpec, index: usize) -> SampleRecord {
    let (mut data, mask, mut rng) = rasterize(spec, index);
    gaussian_blur(&mut data, 1, spec.height, spec.width, spec.blur_sigma);
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in &mut data {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    if spec.quantize {
        for v in &mut data {
            *v = quantize8(*v);
        }
    }
    SampleRecord {
        id: format!("synth_{index:05}"),
        image: Image::new(1, spec.height, spec.width, data),
        mask: Some(mask),
        labeled: true,
    }
}

/// Generate `spec.count` records. Samples are drawn from independent seeded
/// substreams so the result does not depend on thread count.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    Ok((0..spec.count)
        .into_par_iter()
        .map(|i| synth_one(spec, i))
        .collect())
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn decode_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    let sixteen = color.bytes_per_pixel() / color.channel_count().max(1) >= 2;
    if color.has_color() {
        let data: Vec<f32> = if sixteen {
            let rgb = img.to_rgb16();
            planar(rgb.as_raw(), 3, h, w, |v| v as f32 / 65535.0)
        } else {
            let rgb = img.to_rgb8();
            planar(rgb.as_raw(), 3, h, w, |v| v as f32 / 255.0)
        };
        Ok(Image::new(3, h, w, data))
    } else if sixteen {
        let l = img.to_luma16();
        Ok(Image::new(1, h, w, l.as_raw().iter().map(|&v| v as f32 / 65535.0).collect()))
    } else {
        let l = img.to_luma8();
        Ok(Image::new(1, h, w, l.as_raw().iter().map(|&v| v as f32 / 255.0).collect()))
    }
}

fn planar<T: Copy>(interleaved: &[T], c: usize, h: usize, w: usize, f: impl Fn(T) -> f32) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for p in 0..h * w {
        for k in 0..c {
            out[k * h * w + p] = f(interleaved[p * c + k]);
        }
    }
    out
}

fn decode_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.to_luma16();
    let mut data = Vec::with_capacity(h * w);
    for &v in raw.as_raw() {
        // to_luma16 widens 8-bit values by ×257
        let id = if img.color().bytes_per_pixel() == 1 { v / 257 } else { v };
        if id > u8::MAX as u16 {
            return Err(Error::data(format!(
                "{}: class id {id} exceeds 255",
                path.display()
            )));
        }
        data.push(id as u8);
    }
    Ok(Mask::new(h, w, data))
}

/// Load `images_dir/*.png`, paired by filename with `masks_dir/*.png` when a
/// mask directory is given. Records are sorted by filename.
pub fn load_folder(images_dir: &Path, masks_dir: Option<&Path>, num_classes: usize) -> Result<Vec<SampleRecord>> {
    let files = list_pngs(images_dir)?;
    if files.is_empty() {
        log::warn!("no png images found in {}", images_dir.display());
        return Ok(Vec::new());
    }
    files
        .par_iter()
        .map(|path| {
            let image = decode_image(path)?;
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let mask = match masks_dir {
                Some(dir) => {
                    let mpath = dir.join(path.file_name().expect("listed file has a name"));
                    if !mpath.is_file() {
                        return Err(Error::Ingestion(format!(
                            "missing mask {} for labeled sample {id}",
                            mpath.display()
                        )));
                    }
                    Some(decode_mask(&mpath)?)
                }
                None => None,
            };
            let rec = SampleRecord {
                id,
                image,
                labeled: mask.is_some(),
                mask,
            };
            rec.validate(num_classes)?;
            Ok(rec)
        })
        .collect()
}

/// Write records as `<root>/images/<id>.png` and `<root>/masks/<id>.png`
/// (8-bit grayscale; masks store raw class ids).
pub fn save_folder(records: &[SampleRecord], root: &Path) -> Result<()> {
    let img_dir = root.join("images");
    let mask_dir = root.join("masks");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    std::fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    for rec in records {
        if rec.image.channels != 1 {
            return Err(Error::data(format!("{}: only single-channel images can be saved", rec.id)));
        }
        let (h, w) = (rec.image.height as u32, rec.image.width as u32);
        let bytes: Vec<u8> = rec
            .image
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let path = img_dir.join(format!("{}.png", rec.id));
        image::GrayImage::from_raw(w, h, bytes)
            .expect("buffer matches geometry")
            .save(&path)
            .map_err(|e| Error::Image { path: path.clone(), source: e })?;
        if let Some(m) = &rec.mask {
            let path = mask_dir.join(format!("{}.png", rec.id));
            image::GrayImage::from_raw(w, h, m.data.clone())
                .expect("buffer matches geometry")
                .save(&path)
                .map_err(|e| Error::Image { path: path.clone(), source: e })?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub labeled_fraction: f64,
    pub seed: u64,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
}

/// An unlabeled training sample. Its ground-truth mask, when known, is only
/// reachable through [`UnlabeledSample::evaluation_mask`].
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample {
    pub id: String,
    pub image: Image,
    withheld: Option<Mask>,
}

impl UnlabeledSample {
    pub fn new(id: String, image: Image, withheld: Option<Mask>) -> Self {
        UnlabeledSample { id, image, withheld }
    }

    /// Ground truth for oracle evaluation. Never used on the training path.
    pub fn evaluation_mask(&self) -> Option<&Mask> {
        self.withheld.as_ref()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<UnlabeledSample>,
}

/// Seeded random labeled/unlabeled partition. Both halves keep the input order.
pub fn make_split(records: &[SampleRecord], spec: &SplitSpec) -> Result<Split> {
    let f = spec.labeled_fraction;
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::config(format!("labeled_fraction {f} must lie in (0, 1]")));
    }
    let n = records.len();
    let n_lab = (f * n as f64).round() as usize;
    if n_lab == 0 {
        return Err(Error::config(format!(
            "labeled_fraction {f} of {n} records selects no labeled sample"
        )));
    }
    for r in records {
        r.validate(spec.num_classes)?;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(spec.seed, &[tag::SPLIT]));
    let mut chosen = vec![false; n];
    for &i in &order[..n_lab] {
        chosen[i] = true;
    }
    let mut split = Split::default();
    for (i, r) in records.iter().enumerate() {
        if chosen[i] {
            let mask = r.mask.clone().ok_or_else(|| {
                Error::data(format!("{} selected as labeled but has no mask", r.id))
            })?;
            split.labeled.push(LabeledSample {
                id: r.id.clone(),
                image: r.image.clone(),
                mask,
            });
        } else {
            split
                .unlabeled
                .push(UnlabeledSample::new(r.id.clone(), r.image.clone(), r.mask.clone()));
        }
    }
    Ok(split)
}

/// Stateless batch schedule: `batch_at(step)` depends only on the seed, pool
/// sizes and step, so resumed runs see the same batches.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    n_labeled: usize,
    n_unlabeled: usize,
    half: usize,
    iterations: usize,
    seed: u64,
    next: usize,
}

/// Index batches for one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepBatch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

pub fn batch_schedule(
    n_labeled: usize,
    n_unlabeled: usize,
    batch_size: usize,
    iterations: usize,
    seed: u64,
) -> Result<BatchSchedule> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::config(format!("batch_size {batch_size} must be even and positive")));
    }
    if n_labeled == 0 {
        return Err(Error::config("labeled pool is empty"));
    }
    Ok(BatchSchedule {
        n_labeled,
        n_unlabeled,
        half: batch_size / 2,
        iterations,
        seed,
        next: 0,
    })
}

fn pool_draw(seed: u64, pool_tag: u64, n: usize, start: usize, count: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(count);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for g in start..start + count {
        let epoch = g / n;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng_from(seed, &[pool_tag, epoch as u64]));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("filled above").1[g % n]);
    }
    out
}

impl BatchSchedule {
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn batch_at(&self, step: usize) -> StepBatch {
        let start = step * self.half;
        StepBatch {
            labeled: pool_draw(self.seed, tag::SCHEDULE_LABELED, self.n_labeled, start, self.half),
            unlabeled: pool_draw(self.seed, tag::SCHEDULE_UNLABELED, self.n_unlabeled, start, self.half),
        }
    }

    /// Continue iteration from `step`.
    pub fn skip_to(mut self, step: usize) -> Self {
        self.next = step;
        self
    }
}

impl Iterator for BatchSchedule {
    type Item = StepBatch;

    fn next(&mut self) -> Option<StepBatch> {
        if self.next >= self.iterations {
            return None;
        }
        let b = self.batch_at(self.next);
        self.next += 1;
        Some(b)
    }
}
