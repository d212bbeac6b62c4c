//! Supervised, image-perturbation and distillation losses.
//!
//! Every loss takes logits and returns its value together with the gradient
//! with respect to the student logits. Teachers are always treated as
//! constants. Arithmetic is carried out in `f64` regardless of the tensor
//! element type.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augment::ViewMix;
use crate::error::{Error, Result};
use crate::model::{Stream, StreamSet};
use crate::tensor::{Scalar, Tensor};

/// Discrepancy used for teacher and decoder distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HKind {
    /// Soft Dice against the teacher's argmax one-hot.
    Dice,
    /// Cross-entropy against the teacher's argmax label.
    Ce,
    /// Symmetric KL between temperature-scaled softmaxes.
    Kl,
}

/// Decoder-distillation pair: `w` is `(p_w_w → p_s_w)`, `s` is `(p_w_s → p_s_s)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DkdTerm {
    W,
    S,
}

impl DkdTerm {
    pub fn teacher(self) -> Stream {
        match self {
            DkdTerm::W => Stream::WeakWeak,
            DkdTerm::S => Stream::WeakStrong,
        }
    }

    pub fn student(self) -> Stream {
        match self {
            DkdTerm::W => Stream::StrongWeak,
            DkdTerm::S => Stream::StrongStrong,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IpStream {
    S1,
    S2,
}

impl IpStream {
    pub fn stream(self) -> Stream {
        match self {
            IpStream::S1 => Stream::Strong1,
            IpStream::S2 => Stream::Strong2,
        }
    }
}

pub const TKD_CANDIDATES: [Stream; 4] = [
    Stream::WeakWeak,
    Stream::StrongWeak,
    Stream::WeakStrong,
    Stream::StrongStrong,
];

fn default_tau() -> f64 {
    0.85
}
fn default_eta() -> f64 {
    0.3
}
fn default_h() -> HKind {
    HKind::Dice
}
fn default_temperature() -> f64 {
    1.0
}
fn default_students() -> Vec<Stream> {
    let mut v = TKD_CANDIDATES.to_vec();
    v.sort();
    v
}
fn default_dkd() -> Vec<DkdTerm> {
    vec![DkdTerm::W, DkdTerm::S]
}
fn default_ip() -> Vec<IpStream> {
    vec![IpStream::S1, IpStream::S2]
}
fn default_smooth() -> f64 {
    1e-5
}

/// Config section `loss`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_h")]
    pub h_kind: HKind,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_students")]
    pub tkd_students: Vec<Stream>,
    #[serde(default = "default_dkd")]
    pub dkd_terms: Vec<DkdTerm>,
    #[serde(default = "default_ip")]
    pub ip_streams: Vec<IpStream>,
    #[serde(default = "default_smooth")]
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: default_tau(),
            eta: default_eta(),
            h_kind: default_h(),
            temperature: default_temperature(),
            tkd_students: default_students(),
            dkd_terms: default_dkd(),
            ip_streams: default_ip(),
            dice_smooth: default_smooth(),
        }
    }
}

impl LossConfig {
    /// Sorts and deduplicates the subsets, then checks ranges. `tau` above 1
    /// is accepted and disables every unlabeled term.
    pub fn validate(&mut self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("loss.tau must be finite and >= 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(format!("loss.eta must lie in [0, 1], got {}", self.eta)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("loss.temperature must be > 0"));
        }
        if self.h_kind != HKind::Kl && self.temperature != 1.0 {
            return Err(Error::config("loss.temperature applies to h_kind = \"kl\" only and must be 1 otherwise"));
        }
        if !(self.dice_smooth >= 0.0) {
            return Err(Error::config("loss.dice_smooth must be >= 0"));
        }
        for s in &self.tkd_students {
            if !TKD_CANDIDATES.contains(s) {
                return Err(Error::config(format!(
                    "loss.tkd_students: {} is not one of p_w_w, p_s_w, p_w_s, p_s_s",
                    s.name()
                )));
            }
        }
        self.tkd_students.sort();
        self.tkd_students.dedup();
        self.dkd_terms.sort();
        self.dkd_terms.dedup();
        self.ip_streams.sort();
        self.ip_streams.dedup();
        Ok(())
    }

    /// Streams the enabled terms read.
    pub fn required_streams(&self) -> Vec<Stream> {
        let mut v = vec![Stream::WeakPlain];
        v.extend(self.tkd_students.iter().copied());
        for d in &self.dkd_terms {
            v.push(d.teacher());
            v.push(d.student());
        }
        v.extend(self.ip_streams.iter().map(|s| s.stream()));
        v.sort();
        v.dedup();
        v
    }
}

/// Per-step loss decomposition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub sup: f64,
    pub ip: f64,
    pub tkd: f64,
    pub dkd: f64,
    pub total: f64,
    /// Fraction of pixels passing `tau`, keyed by teacher stream name.
    pub mask_coverage: BTreeMap<String, f64>,
}

/// `sup + ip + (1 − η)·tkd + η·dkd`.
pub fn total_loss(sup: f64, ip: f64, tkd: f64, dkd: f64, eta: f64) -> f64 {
    sup + ip + (1.0 - eta) * tkd + eta * dkd
}

impl LossReport {
    pub fn new(sup: f64, terms: &UnlabeledTerms<impl Scalar>, eta: f64) -> Self {
        LossReport {
            sup,
            ip: terms.ip,
            tkd: terms.tkd,
            dkd: terms.dkd,
            total: total_loss(sup, terms.ip, terms.tkd, terms.dkd, eta),
            mask_coverage: terms.coverage.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.sup, self.ip, self.tkd, self.dkd, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Logits lifted to `f64`, laid out `[N, C, plane]`.
#[derive(Clone, Debug)]
struct Maps {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    z: Vec<f64>,
}

impl Maps {
    fn of<F: Scalar>(t: &Tensor<F>) -> Self {
        let [n, c, h, w] = t.shape();
        Maps {
            n,
            c,
            h,
            w,
            z: t.data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn pixels(&self) -> usize {
        self.n * self.plane()
    }

    #[inline]
    fn idx(&self, b: usize, k: usize, p: usize) -> usize {
        (b * self.c + k) * self.plane() + p
    }

    fn same_shape(&self, o: &Maps) -> bool {
        (self.n, self.c, self.h, self.w) == (o.n, o.c, o.h, o.w)
    }

    fn to_tensor<F: Scalar>(&self, v: &[f64]) -> Tensor<F> {
        Tensor::from_vec(
            [self.n, self.c, self.h, self.w],
            v.iter().map(|&x| F::from_f64_lossy(x)).collect(),
        )
    }

    fn softmax(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.z.len()];
        let plane = self.plane();
        for b in 0..self.n {
            for p in 0..plane {
                let mut m = f64::NEG_INFINITY;
                for k in 0..self.c {
                    m = m.max(self.z[self.idx(b, k, p)] / t);
                }
                let mut s = 0.0;
                for k in 0..self.c {
                    let i = self.idx(b, k, p);
                    let e = (self.z[i] / t - m).exp();
                    out[i] = e;
                    s += e;
                }
                for k in 0..self.c {
                    out[self.idx(b, k, p)] /= s;
                }
            }
        }
        out
    }

    fn log_softmax(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.z.len()];
        let plane = self.plane();
        for b in 0..self.n {
            for p in 0..plane {
                let mut m = f64::NEG_INFINITY;
                for k in 0..self.c {
                    m = m.max(self.z[self.idx(b, k, p)] / t);
                }
                let s: f64 = (0..self.c).map(|k| (self.z[self.idx(b, k, p)] / t - m).exp()).sum();
                let lse = m + s.ln();
                for k in 0..self.c {
                    let i = self.idx(b, k, p);
                    out[i] = self.z[i] / t - lse;
                }
            }
        }
        out
    }

    /// Per-pixel argmax (first maximum wins).
    fn argmax(&self) -> Vec<usize> {
        let plane = self.plane();
        let mut out = vec![0; self.pixels()];
        for b in 0..self.n {
            for p in 0..plane {
                let mut best = 0;
                for k in 1..self.c {
                    if self.z[self.idx(b, k, p)] > self.z[self.idx(b, best, p)] {
                        best = k;
                    }
                }
                out[b * plane + p] = best;
            }
        }
        out
    }

    fn one_hot(&self, labels: &[usize]) -> Vec<f64> {
        let plane = self.plane();
        let mut t = vec![0.0; self.z.len()];
        for b in 0..self.n {
            for p in 0..plane {
                t[self.idx(b, labels[b * plane + p], p)] = 1.0;
            }
        }
        t
    }

    /// Replace each CutMix box of sample `i` with the partner's values.
    fn mixed(&self, mixing: Option<&[Option<ViewMix>]>) -> Maps {
        let mut out = self.clone();
        let Some(mixing) = mixing else { return out };
        for (b, mix) in mixing.iter().enumerate() {
            let Some(mix) = mix else { continue };
            for k in 0..self.c {
                for y in mix.cut.top..mix.cut.top + mix.cut.height {
                    for x in mix.cut.left..mix.cut.left + mix.cut.width {
                        let p = y * self.w + x;
                        out.z[self.idx(b, k, p)] = self.z[self.idx(mix.partner, k, p)];
                    }
                }
            }
        }
        out
    }

    fn confidence(&self, tau: f64) -> Vec<bool> {
        let probs = self.softmax(1.0);
        let plane = self.plane();
        let mut mask = vec![false; self.pixels()];
        for b in 0..self.n {
            for p in 0..plane {
                let m = (0..self.c).map(|k| probs[self.idx(b, k, p)]).fold(f64::NEG_INFINITY, f64::max);
                mask[b * plane + p] = m >= tau;
            }
        }
        mask
    }
}

/// `dL/dz` from `dL/dp` for `p = softmax(z / t)`.
fn softmax_backward(m: &Maps, probs: &[f64], dp: &[f64], t: f64) -> Vec<f64> {
    let plane = m.plane();
    let mut dz = vec![0.0; probs.len()];
    for b in 0..m.n {
        for p in 0..plane {
            let dot: f64 = (0..m.c).map(|k| probs[m.idx(b, k, p)] * dp[m.idx(b, k, p)]).sum();
            for k in 0..m.c {
                let i = m.idx(b, k, p);
                dz[i] = probs[i] * (dp[i] - dot) / t;
            }
        }
    }
    dz
}

fn dice_core(m: &Maps, probs: &[f64], target: &[f64], mask: &[bool], smooth: f64) -> (f64, Vec<f64>) {
    let plane = m.plane();
    let mut grad = vec![0.0; probs.len()];
    if !mask.iter().any(|&v| v) {
        return (0.0, grad);
    }
    let mut ratio_sum = 0.0;
    for k in 0..m.c {
        let (mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0);
        for b in 0..m.n {
            for p in 0..plane {
                if mask[b * plane + p] {
                    let i = m.idx(b, k, p);
                    inter += probs[i] * target[i];
                    ps += probs[i];
                    ts += target[i];
                }
            }
        }
        let num = 2.0 * inter + smooth;
        let den = ps + ts + smooth;
        if den == 0.0 {
            // empty class with no smoothing counts as a perfect match
            ratio_sum += 1.0;
            continue;
        }
        ratio_sum += num / den;
        for b in 0..m.n {
            for p in 0..plane {
                if mask[b * plane + p] {
                    let i = m.idx(b, k, p);
                    grad[i] = -(2.0 * target[i] * den - num) / (den * den) / m.c as f64;
                }
            }
        }
    }
    (1.0 - ratio_sum / m.c as f64, grad)
}

fn ce_core(m: &Maps, labels: &[usize], mask: &[bool]) -> (f64, Vec<f64>) {
    let plane = m.plane();
    let mut grad = vec![0.0; m.z.len()];
    let count = mask.iter().filter(|&&v| v).count();
    if count == 0 {
        return (0.0, grad);
    }
    let logp = m.log_softmax(1.0);
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for b in 0..m.n {
        for p in 0..plane {
            if !mask[b * plane + p] {
                continue;
            }
            let y = labels[b * plane + p];
            assert!(y < m.c, "label {y} out of range for {} classes", m.c);
            loss -= logp[m.idx(b, y, p)];
            for k in 0..m.c {
                let i = m.idx(b, k, p);
                grad[i] = (logp[i].exp() - if k == y { 1.0 } else { 0.0 }) * inv;
            }
        }
    }
    (loss * inv, grad)
}

fn kl_core(teacher: &Maps, student: &Maps, t: f64, mask: &[bool]) -> (f64, Vec<f64>) {
    let plane = student.plane();
    let mut grad = vec![0.0; student.z.len()];
    let count = mask.iter().filter(|&&v| v).count();
    if count == 0 {
        return (0.0, grad);
    }
    let lt = teacher.log_softmax(t);
    let ls = student.log_softmax(t);
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for b in 0..student.n {
        for p in 0..plane {
            if !mask[b * plane + p] {
                continue;
            }
            let mut ps_r = 0.0;
            for k in 0..student.c {
                let i = student.idx(b, k, p);
                let (pt, ps) = (lt[i].exp(), ls[i].exp());
                loss += 0.5 * (pt - ps) * (lt[i] - ls[i]);
                ps_r += ps * (ls[i] - lt[i]);
            }
            for k in 0..student.c {
                let i = student.idx(b, k, p);
                let (pt, ps) = (lt[i].exp(), ls[i].exp());
                let r = ls[i] - lt[i];
                grad[i] = (0.5 * (ps - pt) + 0.5 * ps * (r - ps_r)) / t * inv;
            }
        }
    }
    (loss * inv, grad)
}

fn dice_hard_teacher(teacher: &Maps, student: &Maps, mask: &[bool], smooth: f64) -> (f64, Vec<f64>) {
    let target = student.one_hot(&teacher.argmax());
    let probs = student.softmax(1.0);
    let (v, dp) = dice_core(student, &probs, &target, mask, smooth);
    (v, softmax_backward(student, &probs, &dp, 1.0))
}

fn h_core(teacher: &Maps, student: &Maps, mask: &[bool], kind: HKind, t: f64, smooth: f64) -> (f64, Vec<f64>) {
    match kind {
        HKind::Dice => dice_hard_teacher(teacher, student, mask, smooth),
        HKind::Ce => ce_core(student, &teacher.argmax(), mask),
        HKind::Kl => kl_core(teacher, student, t, mask),
    }
}

/// Softmax over channels of `logits / t`.
pub fn softmax_probs<F: Scalar>(logits: &Tensor<F>, t: f64) -> Result<Tensor<F>> {
    if !(t > 0.0) {
        return Err(Error::config("softmax temperature must be > 0"));
    }
    let m = Maps::of(logits);
    Ok(m.to_tensor(&m.softmax(t)))
}

/// Per-pixel `max_c p ≥ tau` over `[N, C, H, W]` probabilities, flattened `[N·H·W]`.
pub fn confidence_mask<F: Scalar>(probs: &Tensor<F>, tau: f64) -> Vec<bool> {
    let [n, c, h, w] = probs.shape();
    let plane = h * w;
    let mut out = vec![false; n * plane];
    for b in 0..n {
        let s = probs.sample(b);
        for p in 0..plane {
            let m = (0..c).map(|k| s[k * plane + p].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            out[b * plane + p] = m >= tau;
        }
    }
    out
}

/// Confidence mask computed from teacher logits.
pub fn confidence_mask_from_logits<F: Scalar>(logits: &Tensor<F>, tau: f64) -> Vec<bool> {
    Maps::of(logits).confidence(tau)
}

/// `1 − mean_c (2Σ p·t·m + s) / (Σ p·m + Σ t·m + s)`, sums over batch and pixels.
/// Returns the gradient with respect to `probs`.
pub fn soft_dice_loss<F: Scalar>(probs: &Tensor<F>, target: &Tensor<F>, mask: &[bool], smooth: f64) -> (f64, Tensor<F>) {
    assert_eq!(probs.shape(), target.shape(), "dice operand shapes differ");
    let m = Maps::of(probs);
    let t: Vec<f64> = target.data().iter().map(|v| v.as_f64()).collect();
    let (v, g) = dice_core(&m, &m.z, &t, mask, smooth);
    (v, m.to_tensor(&g))
}

/// Mean of `−log softmax(z)[y]` over masked pixels; gradient with respect to logits.
pub fn masked_ce_loss<F: Scalar>(logits: &Tensor<F>, labels: &[usize], mask: &[bool]) -> (f64, Tensor<F>) {
    let m = Maps::of(logits);
    let (v, g) = ce_core(&m, labels, mask);
    (v, m.to_tensor(&g))
}

/// Mean over masked pixels of `0.5·KL(t‖s) + 0.5·KL(s‖t)` on `softmax(·/T)`.
/// Gradient with respect to the student logits.
pub fn kd_kl_loss<F: Scalar>(
    teacher: &Tensor<F>,
    student: &Tensor<F>,
    t: f64,
    mask: &[bool],
) -> (f64, Tensor<F>) {
    assert_eq!(teacher.shape(), student.shape(), "kl operand shapes differ");
    let (mt, ms) = (Maps::of(teacher), Maps::of(student));
    let (v, g) = kl_core(&mt, &ms, t, mask);
    (v, ms.to_tensor(&g))
}

/// Distillation discrepancy selected by `kind`.
pub fn h_loss<F: Scalar>(
    teacher: &Tensor<F>,
    student: &Tensor<F>,
    mask: &[bool],
    kind: HKind,
    t: f64,
    smooth: f64,
) -> (f64, Tensor<F>) {
    assert_eq!(teacher.shape(), student.shape(), "H operand shapes differ");
    let (mt, ms) = (Maps::of(teacher), Maps::of(student));
    let (v, g) = h_core(&mt, &ms, mask, kind, t, smooth);
    (v, ms.to_tensor(&g))
}

/// `0.5·CE + 0.5·soft-Dice` against ground truth over all pixels.
pub fn supervised_loss<F: Scalar>(logits: &Tensor<F>, labels: &[usize], smooth: f64) -> (f64, Tensor<F>) {
    let m = Maps::of(logits);
    assert_eq!(labels.len(), m.pixels(), "label count");
    let mask = vec![true; m.pixels()];
    let (ce, gce) = ce_core(&m, labels, &mask);
    let probs = m.softmax(1.0);
    let (dice, dp) = dice_core(&m, &probs, &m.one_hot(labels), &mask, smooth);
    let gd = softmax_backward(&m, &probs, &dp, 1.0);
    let g: Vec<f64> = gce.iter().zip(&gd).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
    (0.5 * ce + 0.5 * dice, m.to_tensor(&g))
}

/// Unlabeled loss terms and their gradients with respect to each stream's logits.
#[derive(Clone, Debug)]
pub struct UnlabeledTerms<F> {
    pub ip: f64,
    pub tkd: f64,
    pub dkd: f64,
    pub grads: BTreeMap<Stream, Tensor<F>>,
    pub coverage: BTreeMap<String, f64>,
}

struct Prepared<'a, F> {
    set: &'a StreamSet<F>,
    maps: BTreeMap<Stream, Maps>,
}

impl<'a, F: Scalar> Prepared<'a, F> {
    fn new(set: &'a StreamSet<F>, streams: &[Stream]) -> Result<Self> {
        let mut maps = BTreeMap::new();
        for &s in streams {
            let m = Maps::of(set.get(s)?);
            if let Some(first) = maps.values().next() {
                if !m.same_shape(first) {
                    return Err(Error::data(format!("stream {} has a different shape", s.name())));
                }
            }
            maps.insert(s, m);
        }
        Ok(Prepared { set, maps })
    }

    fn map(&self, s: Stream) -> Result<&Maps> {
        self.maps
            .get(&s)
            .ok_or_else(|| Error::config(format!("stream {} was not computed", s.name())))
    }

    /// Teacher map aligned with `student`'s image view.
    fn teacher_for(&self, teacher: Stream, student: Stream) -> Result<Maps> {
        let t = self.map(teacher)?;
        let mixing = self.set.mixing_for(student).filter(|m| !m.is_empty());
        if let Some(m) = mixing {
            if m.len() != t.n {
                return Err(Error::data("cutmix record count differs from batch size"));
            }
            if m.iter().flatten().any(|v| v.partner >= t.n) {
                return Err(Error::data("cutmix partner index out of range"));
            }
        }
        Ok(t.mixed(mixing))
    }

    /// Average of `H(teacher, student)` over `pairs`, gradients scaled by `weight / |pairs|`.
    fn term(
        &self,
        pairs: &[(Stream, Stream)],
        h: impl Fn(&Maps, &Maps, &[bool]) -> (f64, Vec<f64>),
        tau: f64,
        weight: f64,
        grads: &mut BTreeMap<Stream, Vec<f64>>,
    ) -> Result<f64> {
        if pairs.is_empty() {
            return Ok(0.0);
        }
        let scale = 1.0 / pairs.len() as f64;
        let mut total = 0.0;
        for &(t, s) in pairs {
            let teacher = self.teacher_for(t, s)?;
            let student = self.map(s)?;
            let mask = teacher.confidence(tau);
            let (v, g) = h(&teacher, student, &mask);
            total += v;
            let acc = grads.entry(s).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += weight * scale * b;
            }
        }
        Ok(total * scale)
    }
}

fn pairs_tkd(cfg: &LossConfig) -> Vec<(Stream, Stream)> {
    cfg.tkd_students.iter().map(|&s| (Stream::WeakPlain, s)).collect()
}

fn pairs_dkd(cfg: &LossConfig) -> Vec<(Stream, Stream)> {
    cfg.dkd_terms.iter().map(|d| (d.teacher(), d.student())).collect()
}

fn pairs_ip(cfg: &LossConfig) -> Vec<(Stream, Stream)> {
    cfg.ip_streams.iter().map(|s| (Stream::WeakPlain, s.stream())).collect()
}

fn finish<F: Scalar>(prep: &Prepared<F>, grads: BTreeMap<Stream, Vec<f64>>) -> Result<BTreeMap<Stream, Tensor<F>>> {
    grads
        .into_iter()
        .map(|(s, g)| Ok((s, prep.map(s)?.to_tensor(&g))))
        .collect()
}

fn single_term<F: Scalar>(
    set: &StreamSet<F>,
    cfg: &LossConfig,
    pairs: Vec<(Stream, Stream)>,
    force_dice: bool,
) -> Result<(f64, BTreeMap<Stream, Tensor<F>>)> {
    let mut streams: Vec<Stream> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    streams.sort();
    streams.dedup();
    let prep = Prepared::new(set, &streams)?;
    let mut grads = BTreeMap::new();
    let kind = if force_dice { HKind::Dice } else { cfg.h_kind };
    let h = |t: &Maps, s: &Maps, m: &[bool]| h_core(t, s, m, kind, cfg.temperature, cfg.dice_smooth);
    let v = prep.term(&pairs, h, cfg.tau, 1.0, &mut grads)?;
    Ok((v, finish(&prep, grads)?))
}

/// Teacher distillation: mean of `H(p_w_n, student)` over `cfg.tkd_students`.
pub fn tkd_loss<F: Scalar>(set: &StreamSet<F>, cfg: &LossConfig) -> Result<(f64, BTreeMap<Stream, Tensor<F>>)> {
    single_term(set, cfg, pairs_tkd(cfg), false)
}

/// Decoder distillation: mean of `H(p_w_j, p_s_j)` over `cfg.dkd_terms`.
pub fn dkd_loss<F: Scalar>(set: &StreamSet<F>, cfg: &LossConfig) -> Result<(f64, BTreeMap<Stream, Tensor<F>>)> {
    single_term(set, cfg, pairs_dkd(cfg), false)
}

/// Image-perturbation loss: mean Dice-form `H(p_w_n, p_s{1,2})` over `cfg.ip_streams`.
pub fn ip_loss<F: Scalar>(set: &StreamSet<F>, cfg: &LossConfig) -> Result<(f64, BTreeMap<Stream, Tensor<F>>)> {
    single_term(set, cfg, pairs_ip(cfg), true)
}

/// All unlabeled terms with gradients already weighted as in the total loss:
/// `ip` by 1, `tkd` by `1 − η`, `dkd` by `η`.
pub fn unlabeled_losses<F: Scalar>(set: &StreamSet<F>, cfg: &LossConfig) -> Result<UnlabeledTerms<F>> {
    let prep = Prepared::new(set, &cfg.required_streams())?;
    let mut grads = BTreeMap::new();
    let h = |t: &Maps, s: &Maps, m: &[bool]| h_core(t, s, m, cfg.h_kind, cfg.temperature, cfg.dice_smooth);
    let dice = |t: &Maps, s: &Maps, m: &[bool]| dice_hard_teacher(t, s, m, cfg.dice_smooth);
    let ip = prep.term(&pairs_ip(cfg), dice, cfg.tau, 1.0, &mut grads)?;
    let tkd = prep.term(&pairs_tkd(cfg), h, cfg.tau, 1.0 - cfg.eta, &mut grads)?;
    let dkd = prep.term(&pairs_dkd(cfg), h, cfg.tau, cfg.eta, &mut grads)?;
    let mut coverage = BTreeMap::new();
    let mut teachers = vec![Stream::WeakPlain];
    teachers.extend(cfg.dkd_terms.iter().map(|d| d.teacher()));
    for t in teachers {
        let mask = prep.map(t)?.confidence(cfg.tau);
        let frac = mask.iter().filter(|&&v| v).count() as f64 / mask.len().max(1) as f64;
        coverage.insert(t.name().to_string(), frac);
    }
    Ok(UnlabeledTerms {
        ip,
        tkd,
        dkd,
        grads: finish(&prep, grads)?,
        coverage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(c: usize, v: Vec<f64>) -> Tensor<f64> {
        let n = v.len() / c;
        Tensor::from_vec([1, c, 1, n], v)
    }

    #[test]
    fn softmax_scalar_oracle() {
        let p = softmax_probs(&t1(2, vec![2.0, 0.0]), 1.0).unwrap();
        let e = 2f64.exp();
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.data()[0] - 0.8808).abs() < 1e-4);
        let u = softmax_probs(&t1(3, vec![0.4, 0.4, 0.4]), 1.0).unwrap();
        assert!(u.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert!(softmax_probs(&t1(2, vec![1.0, 0.0]), 0.0).is_err());
    }

    #[test]
    fn confidence_threshold() {
        let p = t1(2, vec![0.9, 0.1]);
        assert_eq!(confidence_mask(&p, 0.85), vec![true]);
        assert_eq!(confidence_mask(&p, 0.0), vec![true]);
        assert_eq!(confidence_mask(&p, 1.0 + 1e-9), vec![false]);
    }

    #[test]
    fn dice_hand_value() {
        let probs = Tensor::<f64>::full([1, 1, 2, 2], 0.5);
        let target = Tensor::<f64>::full([1, 1, 2, 2], 1.0);
        let (v, _) = soft_dice_loss(&probs, &target, &[true; 4], 0.0);
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        let (z, g) = soft_dice_loss(&probs, &target, &[false; 4], 0.0);
        assert_eq!(z, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ce_values() {
        let (v, _) = masked_ce_loss(&t1(2, vec![2.0, 0.0]), &[0], &[true]);
        assert!((v + (2f64.exp() / (2f64.exp() + 1.0)).ln()).abs() < 1e-12);
        assert!((v - 0.1269).abs() < 1e-4);
        let (u, _) = masked_ce_loss(&t1(2, vec![0.0, 0.0]), &[1], &[true]);
        assert!((u - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_kl_pixel_value() {
        let (v, _) = kd_kl_loss(&t1(2, vec![2.0, 0.0]), &t1(2, vec![0.0, 2.0]), 1.0, &[true]);
        let a = 2f64.exp() / (2f64.exp() + 1.0);
        let b = 1.0 - a;
        assert!((v - (a - b) * (a / b).ln()).abs() < 1e-12);
        assert!((v - 1.5232).abs() < 1e-4);
    }

    #[test]
    fn affine_total() {
        for eta in [0.0, 0.3, 1.0] {
            let t = total_loss(1.0, 2.0, 3.0, 5.0, eta);
            assert_eq!(t, 1.0 + 2.0 + (1.0 - eta) * 3.0 + eta * 5.0);
        }
    }

    #[test]
    fn validate_rejects_bad_config() {
        let mut c = LossConfig {
            temperature: 2.0,
            ..LossConfig::default()
        };
        assert!(c.validate().is_err());
        c.h_kind = HKind::Kl;
        assert!(c.validate().is_ok());
        c.eta = 1.5;
        assert!(c.validate().is_err());
        let mut d = LossConfig {
            tkd_students: vec![Stream::Strong1],
            ..LossConfig::default()
        };
        assert!(d.validate().is_err());
    }
}
