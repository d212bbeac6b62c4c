//! Overlap and surface-distance metrics.
//!
//! Distances are in pixel units (isotropic spacing 1). The 95th percentile
//! uses linear interpolation between order statistics.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::UNet;
use crate::raster::{images_to_tensor, Image, Mask};

/// Overlap of two binary masks as percentages. Both empty scores `(100, 100)`.
pub fn binary_dice_jaccard(pred: &[bool], gt: &[bool]) -> (f64, f64) {
    assert_eq!(pred.len(), gt.len(), "mask sizes differ");
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    if a + b == 0 {
        return (100.0, 100.0);
    }
    let union = a + b - inter;
    (
        200.0 * inter as f64 / (a + b) as f64,
        100.0 * inter as f64 / union as f64,
    )
}

/// Per-class Dice and Jaccard averaged over foreground classes `1..num_classes`.
pub fn dice_jaccard(pred: &Mask, gt: &Mask, num_classes: usize) -> (f64, f64) {
    assert_eq!((pred.height, pred.width), (gt.height, gt.width), "mask shapes differ");
    let fg = num_classes.max(2) - 1;
    let (mut d, mut j) = (0.0, 0.0);
    for c in 1..=fg as u8 {
        let (dc, jc) = binary_dice_jaccard(&pred.binary(c), &gt.binary(c));
        d += dc;
        j += jc;
    }
    (d / fg as f64, j / fg as f64)
}

/// Foreground pixels with a 4-neighbour that is background or outside the image.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let bg = |yy: isize, xx: isize| {
                yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize || !mask[yy as usize * w + xx as usize]
            };
            let (yi, xi) = (y as isize, x as isize);
            out[y * w + x] = bg(yi - 1, xi) || bg(yi + 1, xi) || bg(yi, xi - 1) || bg(yi, xi + 1);
        }
    }
    out
}

/// Exact 1-D squared distance transform (lower envelope of parabolas) over
/// the finite sites of `f`.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        if k < 0 {
            k = 0;
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        }
        let mut s;
        loop {
            let p = v[k as usize];
            let pf = p as f64;
            s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf);
            if s <= z[k as usize] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k as usize] = q;
        z[k as usize] = s;
        z[k as usize + 1] = f64::INFINITY;
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[j + 1] < qf {
            j += 1;
        }
        let d = qf - v[j] as f64;
        *o = d * d + f[v[j]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` site.
/// Infinite everywhere when there is no site.
pub fn squared_edt(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut col_out);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row_out);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// Bidirectional boundary-to-boundary distances, sorted ascending. `None` when
/// either mask is empty.
pub fn surface_distances(pred: &[bool], gt: &[bool], h: usize, w: usize) -> Option<Vec<f64>> {
    assert_eq!(pred.len(), h * w);
    assert_eq!(gt.len(), h * w);
    if !pred.iter().any(|&v| v) || !gt.iter().any(|&v| v) {
        return None;
    }
    let bp = boundary(pred, h, w);
    let bg = boundary(gt, h, w);
    let dp = squared_edt(&bp, h, w);
    let dg = squared_edt(&bg, h, w);
    let mut out = Vec::new();
    for i in 0..h * w {
        if bp[i] {
            out.push(dg[i].sqrt());
        }
        if bg[i] {
            out.push(dp[i].sqrt());
        }
    }
    out.sort_by(f64::total_cmp);
    Some(out)
}

/// Linear-interpolation percentile of sorted values, `q` in `[0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty set");
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

pub fn hd95(sorted: &[f64]) -> f64 {
    percentile(sorted, 95.0)
}

pub fn asd(distances: &[f64]) -> f64 {
    distances.iter().sum::<f64>() / distances.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
    /// Mean over foreground classes with defined distances.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub empty_pred: bool,
    pub empty_gt: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: Vec<SampleMetrics>,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub undefined_distance: usize,
    pub empty_pred: usize,
    pub empty_gt: usize,
}

pub fn sample_metrics(id: &str, pred: &Mask, gt: &Mask, num_classes: usize) -> SampleMetrics {
    let (dice, jaccard) = dice_jaccard(pred, gt, num_classes);
    let (mut hd, mut sd, mut defined) = (0.0, 0.0, 0usize);
    for c in 1..num_classes.max(2) as u8 {
        if let Some(d) = surface_distances(&pred.binary(c), &gt.binary(c), gt.height, gt.width) {
            hd += hd95(&d);
            sd += asd(&d);
            defined += 1;
        }
    }
    let avg = |s: f64| (defined > 0).then(|| s / defined as f64);
    SampleMetrics {
        id: id.to_string(),
        dice,
        jaccard,
        hd95: avg(hd),
        asd: avg(sd),
        empty_pred: pred.foreground_pixels() == 0,
        empty_gt: gt.foreground_pixels() == 0,
    }
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v.flatten() {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl MetricsReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Self {
        let n = samples.len().max(1) as f64;
        MetricsReport {
            dice: samples.iter().map(|s| s.dice).sum::<f64>() / n,
            jaccard: samples.iter().map(|s| s.jaccard).sum::<f64>() / n,
            hd95: mean_defined(samples.iter().map(|s| s.hd95)),
            asd: mean_defined(samples.iter().map(|s| s.asd)),
            undefined_distance: samples.iter().filter(|s| s.hd95.is_none()).count(),
            empty_pred: samples.iter().filter(|s| s.empty_pred).count(),
            empty_gt: samples.iter().filter(|s| s.empty_gt).count(),
            samples,
        }
    }

    /// One JSON object with the aggregate numbers (no per-sample rows).
    pub fn summary_json(&self, step: Option<usize>) -> serde_json::Value {
        serde_json::json!({
            "step": step,
            "dice": self.dice,
            "jaccard": self.jaccard,
            "hd95": self.hd95,
            "asd": self.asd,
            "undefined_distance": self.undefined_distance,
            "empty_pred": self.empty_pred,
            "n": self.samples.len(),
        })
    }

    /// Markdown table with columns Dice(%), Jaccard(%), 95HD, ASD.
    pub fn table(&self, label: &str) -> String {
        let mut s = String::new();
        s.push_str("| Method | Dice(%) | Jaccard(%) | 95HD | ASD |\n|---|---|---|---|---|\n");
        let _ = writeln!(s, "{}", table_row(label, self));
        s
    }
}

/// A single `| label | dice | jaccard | hd95 | asd |` row.
pub fn table_row(label: &str, r: &MetricsReport) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
    format!(
        "| {label} | {:.2} | {:.2} | {} | {} |",
        r.dice,
        r.jaccard,
        fmt(r.hd95),
        fmt(r.asd)
    )
}

pub fn evaluate_predictions(ids: &[String], preds: &[Mask], gts: &[Mask], num_classes: usize) -> MetricsReport {
    let samples = (0..gts.len())
        .into_par_iter()
        .map(|i| sample_metrics(&ids[i], &preds[i], &gts[i], num_classes))
        .collect();
    MetricsReport::from_samples(samples)
}

/// Argmax prediction from the unperturbed forward pass, scored against `gts`.
pub fn evaluate_model(
    net: &UNet,
    params: &[f32],
    ids: &[String],
    images: &[&Image],
    gts: &[&Mask],
    chunk: usize,
) -> Result<MetricsReport> {
    if images.len() != gts.len() || ids.len() != gts.len() {
        return Err(Error::data("evaluation ids, images and masks differ in count"));
    }
    if images.is_empty() {
        return Ok(MetricsReport::from_samples(Vec::new()));
    }
    let preds = predict_masks(net, params, images, chunk)?;
    let owned: Vec<Mask> = gts.iter().map(|m| (*m).clone()).collect();
    Ok(evaluate_predictions(ids, &preds, &owned, net.config().num_classes))
}

pub fn predict_masks(net: &UNet, params: &[f32], images: &[&Image], chunk: usize) -> Result<Vec<Mask>> {
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        let x = images_to_tensor::<f32>(part);
        let logits = net.predict(params, &x, part.len())?;
        let (h, w) = (logits.height(), logits.width());
        let labels = logits.argmax_channels();
        for b in 0..part.len() {
            out.push(Mask::new(h, w, labels[b * h * w..(b + 1) * h * w].iter().map(|&v| v as u8).collect()));
        }
    }
    Ok(out)
}
