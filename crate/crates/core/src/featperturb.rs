//! Bottleneck feature perturbations (`P^n`, `P^w`, `P^s`) and the
//! batch-stacking used to decode several perturbed streams in one call.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FeaturePyramid, Perturbation, Stream, View};
use crate::rng::{rng_from, tag};
use crate::tensor::{Scalar, Tensor};

/// SELU negative saturation value `-λ·α`, used by the alpha dropout variants.
const ALPHA_PRIME: f64 = 1.758_099_340_847_376_6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    None,
    /// Zero whole `(sample, channel)` maps.
    ChannelDropout,
    /// Element-wise alpha dropout.
    AlphaDropout,
    /// Alpha dropout with one draw per `(sample, channel)`.
    FeatureAlphaDropout,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePerturbSpec {
    pub kind: PerturbKind,
    pub rate: f64,
    pub scale_correction: bool,
}

impl FeaturePerturbSpec {
    pub fn identity() -> Self {
        FeaturePerturbSpec {
            kind: PerturbKind::None,
            rate: 0.0,
            scale_correction: true,
        }
    }

    pub fn channel_dropout(rate: f64) -> Self {
        FeaturePerturbSpec {
            kind: PerturbKind::ChannelDropout,
            rate,
            scale_correction: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::config(format!(
                "perturbation rate must lie in [0, 1), got {}",
                self.rate
            )));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.kind == PerturbKind::None || self.rate == 0.0
    }
}

/// Config section `perturb`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    #[serde(default = "default_kind")]
    pub kind: PerturbKind,
    #[serde(default = "default_weak_rate")]
    pub weak_rate: f64,
    #[serde(default = "default_strong_rate")]
    pub strong_rate: f64,
    #[serde(default = "default_true")]
    pub scale_correction: bool,
}

fn default_kind() -> PerturbKind {
    PerturbKind::ChannelDropout
}
fn default_weak_rate() -> f64 {
    0.25
}
fn default_strong_rate() -> f64 {
    0.75
}
fn default_true() -> bool {
    true
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            kind: default_kind(),
            weak_rate: default_weak_rate(),
            strong_rate: default_strong_rate(),
            scale_correction: true,
        }
    }
}

impl PerturbConfig {
    /// The weak rate may equal the strong rate (the zero-gap ablation row)
    /// but never exceed it.
    pub fn validate(&self) -> Result<()> {
        self.spec_for(Perturbation::Weak).validate()?;
        self.spec_for(Perturbation::Strong).validate()?;
        if self.weak_rate > self.strong_rate {
            return Err(Error::config(format!(
                "perturb.weak_rate ({}) must not exceed perturb.strong_rate ({})",
                self.weak_rate, self.strong_rate
            )));
        }
        Ok(())
    }

    pub fn spec_for(&self, p: Perturbation) -> FeaturePerturbSpec {
        let rate = match p {
            Perturbation::None => return FeaturePerturbSpec::identity(),
            Perturbation::Weak => self.weak_rate,
            Perturbation::Strong => self.strong_rate,
        };
        FeaturePerturbSpec {
            kind: self.kind,
            rate,
            scale_correction: self.scale_correction,
        }
    }
}

/// Saved multiplier for the backward pass: `y = x·m + offset`, so `dx = dy·m`.
#[derive(Clone, Debug, PartialEq)]
pub enum PerturbTape<F> {
    Identity,
    PerChannel(Vec<F>),
    PerElement(Vec<F>),
}

impl<F: Scalar> PerturbTape<F> {
    /// Zero pattern of the dropout mask, one entry per multiplier.
    pub fn dropped(&self) -> Vec<bool> {
        match self {
            PerturbTape::Identity => Vec::new(),
            PerturbTape::PerChannel(m) | PerturbTape::PerElement(m) => {
                m.iter().map(|&v| v == F::zero()).collect()
            }
        }
    }
}

/// Apply one perturbation to `[B, C, h, w]` features.
pub fn perturb<F: Scalar>(
    features: &Tensor<F>,
    spec: &FeaturePerturbSpec,
    rng: &mut impl Rng,
) -> Result<(Tensor<F>, PerturbTape<F>)> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok((features.clone(), PerturbTape::Identity));
    }
    let [n, c, h, w] = features.shape();
    let plane = h * w;
    let p = spec.rate;
    let keep = 1.0 - p;
    match spec.kind {
        PerturbKind::None => unreachable!("handled by is_identity"),
        PerturbKind::ChannelDropout => {
            let scale = if spec.scale_correction { 1.0 / keep } else { 1.0 };
            let scale = F::from_f64_lossy(scale);
            let mult: Vec<F> = (0..n * c)
                .map(|_| if rng.random::<f64>() < p { F::zero() } else { scale })
                .collect();
            let mut out = features.clone();
            for (chunk, &m) in out.data_mut().chunks_mut(plane).zip(&mult) {
                for v in chunk {
                    *v *= m;
                }
            }
            Ok((out, PerturbTape::PerChannel(mult)))
        }
        PerturbKind::AlphaDropout | PerturbKind::FeatureAlphaDropout => {
            let a = 1.0 / ((ALPHA_PRIME * ALPHA_PRIME * p + 1.0) * keep).sqrt();
            let per_channel = spec.kind == PerturbKind::FeatureAlphaDropout;
            let draws = if per_channel { n * c } else { features.len() };
            let kept: Vec<bool> = (0..draws).map(|_| rng.random::<f64>() >= p).collect();
            let mult: Vec<F> = kept
                .iter()
                .map(|&k| if k { F::from_f64_lossy(a) } else { F::zero() })
                .collect();
            let offset = |k: bool| {
                let k = if k { 1.0 } else { 0.0 };
                F::from_f64_lossy(ALPHA_PRIME * a * (k - 1.0 + p))
            };
            let mut out = features.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                let j = if per_channel { i / plane } else { i };
                *v = *v * mult[j] + offset(kept[j]);
            }
            Ok((
                out,
                if per_channel {
                    PerturbTape::PerChannel(mult)
                } else {
                    PerturbTape::PerElement(mult)
                },
            ))
        }
    }
}

pub fn perturb_backward<F: Scalar>(tape: &PerturbTape<F>, dy: &Tensor<F>) -> Tensor<F> {
    match tape {
        PerturbTape::Identity => dy.clone(),
        PerturbTape::PerChannel(m) => {
            let plane = dy.plane();
            let mut dx = dy.clone();
            for (chunk, &k) in dx.data_mut().chunks_mut(plane).zip(m) {
                for v in chunk {
                    *v *= k;
                }
            }
            dx
        }
        PerturbTape::PerElement(m) => {
            let mut dx = dy.clone();
            for (v, &k) in dx.data_mut().iter_mut().zip(m) {
                *v *= k;
            }
            dx
        }
    }
}

/// Perturb a single stream's bottleneck with its per-stream seed. Skip
/// connections pass through untouched.
pub fn perturb_block<F: Scalar>(
    source: &FeaturePyramid<F>,
    stream: Stream,
    cfg: &PerturbConfig,
    step_seed: u64,
) -> Result<(FeaturePyramid<F>, PerturbTape<F>)> {
    let spec = cfg.spec_for(stream.perturbation());
    let mut rng = rng_from(step_seed, &[tag::PERTURB, stream.index()]);
    let (bottleneck, tape) = perturb(&source.bottleneck, &spec, &mut rng)?;
    Ok((
        FeaturePyramid {
            skips: source.skips.clone(),
            bottleneck,
        },
        tape,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockEntry {
    pub stream: Stream,
    pub start: usize,
    pub len: usize,
}

/// Which contiguous batch range of a stacked tensor belongs to which stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockIndex {
    entries: Vec<BlockEntry>,
}

impl BlockIndex {
    /// Contiguous, equally sized, ascending blocks with distinct streams.
    pub fn new(entries: Vec<BlockEntry>) -> Result<Self> {
        let index = BlockIndex { entries };
        index.validate(None)?;
        Ok(index)
    }

    pub fn entries(&self) -> &[BlockEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self, total: Option<usize>) -> Result<()> {
        let Some(first) = self.entries.first() else {
            return Err(Error::internal("empty block index"));
        };
        let b = first.len;
        let mut expect = 0;
        let mut seen = Vec::new();
        for e in &self.entries {
            if e.start != expect || e.len != b || b == 0 {
                return Err(Error::internal(format!(
                    "corrupted block index: block {} at {} (len {}), expected start {expect} len {b}",
                    e.stream.name(),
                    e.start,
                    e.len
                )));
            }
            if seen.contains(&e.stream) {
                return Err(Error::internal(format!(
                    "corrupted block index: stream {} appears twice",
                    e.stream.name()
                )));
            }
            seen.push(e.stream);
            expect += b;
        }
        if let Some(t) = total {
            if t != expect {
                return Err(Error::internal(format!(
                    "block index covers {expect} samples but tensor has {t}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StackedFeatures<F> {
    pub pyramid: FeaturePyramid<F>,
    pub index: BlockIndex,
}

/// Perturb each stream's source features and stack the results along the
/// batch axis in the order of `streams`.
pub fn stack_for_decoder<F: Scalar>(
    sources: &[(View, &FeaturePyramid<F>)],
    streams: &[Stream],
    cfg: &PerturbConfig,
    step_seed: u64,
) -> Result<(StackedFeatures<F>, Vec<PerturbTape<F>>)> {
    let b = sources
        .first()
        .map(|(_, p)| p.batch())
        .ok_or_else(|| Error::internal("no source features to stack"))?;
    let reference = sources[0].1;
    for (_, p) in sources {
        let same = p.bottleneck.shape() == reference.bottleneck.shape()
            && p.skips.len() == reference.skips.len()
            && p.skips.iter().zip(&reference.skips).all(|(a, r)| a.shape() == r.shape());
        if !same {
            return Err(Error::internal("source pyramids differ in shape"));
        }
    }
    let mut blocks = Vec::with_capacity(streams.len());
    let mut tapes = Vec::with_capacity(streams.len());
    let mut entries = Vec::with_capacity(streams.len());
    for (i, &stream) in streams.iter().enumerate() {
        let src = sources
            .iter()
            .find(|(v, _)| *v == stream.view())
            .map(|(_, p)| *p)
            .ok_or_else(|| Error::internal(format!("no features for view of {}", stream.name())))?;
        let (block, tape) = perturb_block(src, stream, cfg, step_seed)?;
        blocks.push(block);
        tapes.push(tape);
        entries.push(BlockEntry {
            stream,
            start: i * b,
            len: b,
        });
    }
    let pyramid = FeaturePyramid::concat(&blocks.iter().collect::<Vec<_>>());
    Ok((
        StackedFeatures {
            pyramid,
            index: BlockIndex::new(entries)?,
        },
        tapes,
    ))
}

/// Split a stacked tensor (features or decoder output) back into per-stream blocks.
pub fn unstack<F: Scalar>(stacked: &Tensor<F>, index: &BlockIndex) -> Result<Vec<(Stream, Tensor<F>)>> {
    index.validate(Some(stacked.batch()))?;
    Ok(index
        .entries()
        .iter()
        .map(|e| (e.stream, stacked.slice_batch(e.start, e.len)))
        .collect())
}
