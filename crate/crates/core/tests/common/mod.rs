#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::Write as _;

use crossmatch::augment::{CutBox, ViewMix};
use crossmatch::datasets::{synth_generate, SampleRecord, SynthSpec};
use crossmatch::model::{Stream, StreamSet};
use crossmatch::rng::rng_from;
use crossmatch::tensor::Tensor;
use crossmatch::trainer::RunConfig;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Print a result line past the test harness's output capture.
pub fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n} [{verdict}] {name}: {detail}");
}

pub fn randn(shape: [usize; 4], sigma: f64, seed: u64) -> Tensor<f64> {
    let mut rng = rng_from(seed, &[]);
    let d = Normal::new(0.0, sigma).unwrap();
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| d.sample(&mut rng)).collect())
}

/// All seven streams with independent random logits.
pub fn random_streams(shape: [usize; 4], sigma: f64, seed: u64) -> BTreeMap<Stream, Tensor<f64>> {
    Stream::ALL
        .iter()
        .map(|&s| (s, randn(shape, sigma, seed.wrapping_mul(31).wrapping_add(s.index()))))
        .collect()
}

/// A CutMix box on every sample, partner `(i + 1) % n`.
pub fn mixing(n: usize, h: usize, w: usize, seed: u64) -> Vec<Option<ViewMix>> {
    let mut rng = rng_from(seed, &[7]);
    (0..n)
        .map(|i| {
            let bh = rng.random_range(1..=h / 2);
            let bw = rng.random_range(1..=w / 2);
            Some(ViewMix {
                partner: (i + 1) % n,
                cut: CutBox {
                    top: rng.random_range(0..=h - bh),
                    left: rng.random_range(0..=w - bw),
                    height: bh,
                    width: bw,
                },
            })
        })
        .collect()
}

pub fn stream_set(maps: BTreeMap<Stream, Tensor<f64>>, mix: bool, seed: u64) -> StreamSet<f64> {
    let [n, _, h, w] = maps[&Stream::WeakPlain].shape();
    if mix {
        StreamSet {
            maps,
            mix_s1: mixing(n, h, w, seed),
            mix_s2: mixing(n, h, w, seed + 1),
        }
    } else {
        StreamSet::without_mixing(maps)
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &Tensor<f64>, eps: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut y = x.clone();
    for i in 0..x.len() {
        let v = x.data()[i];
        y.data_mut()[i] = v + eps;
        let hi = f(&y);
        y.data_mut()[i] = v - eps;
        let lo = f(&y);
        y.data_mut()[i] = v;
        g[i] = (hi - lo) / (2.0 * eps);
    }
    g
}

/// Largest element-wise `|a − b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Boundary pixels by direct neighbour inspection.
pub fn brute_boundary(m: &[bool], h: usize, w: usize) -> Vec<(i64, i64)> {
    let at = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && m[y as usize * w + x as usize];
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if at(y, x) && (!at(y - 1, x) || !at(y + 1, x) || !at(y, x - 1) || !at(y, x + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// All-pairs bidirectional nearest-boundary distances, sorted.
pub fn brute_surface_distances(a: &[bool], b: &[bool], h: usize, w: usize) -> Option<Vec<f64>> {
    let (ba, bb) = (brute_boundary(a, h, w), brute_boundary(b, h, w));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let nearest = |p: (i64, i64), set: &[(i64, i64)]| {
        set.iter()
            .map(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2))
            .min()
            .unwrap() as f64
    };
    let mut d: Vec<f64> = ba.iter().map(|&p| nearest(p, &bb).sqrt()).collect();
    d.extend(bb.iter().map(|&p| nearest(p, &ba).sqrt()));
    d.sort_by(f64::total_cmp);
    Some(d)
}

/// `q`-th percentile with linear interpolation at rank `q/100 · (n − 1)`.
pub fn brute_percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Desk-scale synthetic set: 32×32 single-channel images, one or two
/// faint bright shapes of widely varying size, up to three darker
/// distractors and noise.
pub fn desk_spec(count: usize, seed: u64) -> SynthSpec {
    let mut spec = SynthSpec::new(count, 32, 32, 2, seed);
    spec.shapes = [1, 2];
    spec.distractors = [0, 3];
    spec.negative_offsets = true;
    spec.radius = [0.05, 0.35];
    spec.background = [0.05, 0.7];
    spec.offset = [0.12, 0.35];
    spec.noise_sigma = 0.1;
    spec
}

/// 200 training and 50 validation records.
pub fn desk_data(seed: u64) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
    let mut recs = synth_generate(&desk_spec(250, seed)).unwrap();
    let val = recs.split_off(200);
    (recs, val)
}

/// Small U-Net used by the desk experiments.
pub fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.net.depth = 3;
    cfg.net.base_width = 8;
    cfg
}

/// Tiny network and images for fast structural checks.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.net.depth = 2;
    cfg.net.base_width = 4;
    cfg.net.groups = 2;
    cfg.train.batch_size = 4;
    cfg.train.iterations = 4;
    cfg.data.labeled_fraction = 0.25;
    cfg
}

pub fn tiny_records(count: usize, seed: u64) -> Vec<SampleRecord> {
    synth_generate(&SynthSpec::new(count, 16, 16, 2, seed)).unwrap()
}
