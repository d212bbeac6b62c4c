//! 2-D U-Net with a bottleneck injection point, and the stream assembly that
//! turns three image views into the seven CrossMatch prediction maps.
//!
//! The weak/strong "encoders" and none/weak/strong "decoders" are never
//! separate weights: every stream runs through the same parameter vector,
//! composed with an image view and a bottleneck perturbation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augment::ViewMix;
use crate::error::{Error, Result};
use crate::featperturb::{
    perturb_backward, perturb_block, stack_for_decoder, unstack, BlockIndex, PerturbConfig,
    PerturbTape,
};
use crate::nn::{
    concat_channels, max_pool2, max_pool2_backward, split_channels, upsample2,
    upsample2_backward, Conv2d, ConvBlock, ConvBlockTape, Normalization, ParamLayout,
};
use crate::rng::{rng_from, tag};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_normalization")]
    pub normalization: Normalization,
    /// Group count for group normalization; must divide `base_width`.
    #[serde(default = "default_groups")]
    pub groups: usize,
}

fn default_in_channels() -> usize {
    1
}
fn default_num_classes() -> usize {
    2
}
fn default_base_width() -> usize {
    16
}
fn default_depth() -> usize {
    4
}
fn default_normalization() -> Normalization {
    Normalization::Group
}
fn default_groups() -> usize {
    4
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: default_in_channels(),
            num_classes: default_num_classes(),
            base_width: default_base_width(),
            depth: default_depth(),
            normalization: default_normalization(),
            groups: default_groups(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config(format!("net.depth must be >= 2, got {}", self.depth)));
        }
        if self.num_classes < 2 {
            return Err(Error::config("net.num_classes must be >= 2"));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::config("net.in_channels and net.base_width must be positive"));
        }
        if self.normalization == Normalization::Group
            && (self.groups == 0 || self.base_width % self.groups != 0)
        {
            return Err(Error::config(format!(
                "net.groups ({}) must divide net.base_width ({})",
                self.groups, self.base_width
            )));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Encoder outputs: one skip map per level above the bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<F> {
    pub skips: Vec<Tensor<F>>,
    pub bottleneck: Tensor<F>,
}

impl<F: Scalar> FeaturePyramid<F> {
    pub fn batch(&self) -> usize {
        self.bottleneck.batch()
    }

    pub fn zeros_like(&self) -> Self {
        FeaturePyramid {
            skips: self.skips.iter().map(|s| Tensor::zeros(s.shape())).collect(),
            bottleneck: Tensor::zeros(self.bottleneck.shape()),
        }
    }

    pub fn concat(parts: &[&FeaturePyramid<F>]) -> Self {
        let levels = parts[0].skips.len();
        FeaturePyramid {
            skips: (0..levels)
                .map(|l| Tensor::concat_batch(&parts.iter().map(|p| &p.skips[l]).collect::<Vec<_>>()))
                .collect(),
            bottleneck: Tensor::concat_batch(&parts.iter().map(|p| &p.bottleneck).collect::<Vec<_>>()),
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        FeaturePyramid {
            skips: self.skips.iter().map(|s| s.slice_batch(start, len)).collect(),
            bottleneck: self.bottleneck.slice_batch(start, len),
        }
    }

    pub fn add_assign(&mut self, other: &FeaturePyramid<F>) {
        for (a, b) in self.skips.iter_mut().zip(&other.skips) {
            a.add_assign(b);
        }
        self.bottleneck.add_assign(&other.bottleneck);
    }
}

#[derive(Clone, Debug)]
pub struct EncoderTape<F> {
    blocks: Vec<ConvBlockTape<F>>,
    pools: Vec<(Vec<u32>, [usize; 4])>,
}

#[derive(Clone, Debug)]
pub struct DecoderTape<F> {
    blocks: Vec<ConvBlockTape<F>>,
    head_input: Tensor<F>,
}

/// Encoder/decoder call counters, reported per training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invocations {
    pub encoder: usize,
    pub decoder: usize,
}

#[derive(Clone, Debug)]
pub struct UNet {
    config: NetConfig,
    layout_len: usize,
    enc: Vec<ConvBlock>,
    dec: Vec<ConvBlock>,
    head: Conv2d,
    layout: std::sync::Arc<ParamLayout>,
}

impl UNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let (norm, groups) = (config.normalization, config.groups);
        let mut enc = Vec::with_capacity(config.depth + 1);
        for level in 0..=config.depth {
            let in_c = if level == 0 {
                config.in_channels
            } else {
                config.width(level - 1)
            };
            enc.push(ConvBlock::new(
                &mut layout,
                &format!("enc{level}"),
                in_c,
                config.width(level),
                norm,
                groups,
            ));
        }
        let mut dec = Vec::with_capacity(config.depth);
        for level in 0..config.depth {
            dec.push(ConvBlock::new(
                &mut layout,
                &format!("dec{level}"),
                config.width(level + 1) + config.width(level),
                config.width(level),
                norm,
                groups,
            ));
        }
        let head = Conv2d::new(&mut layout, "head", config.base_width, config.num_classes, 1);
        Ok(UNet {
            layout_len: layout.total(),
            config,
            enc,
            dec,
            head,
            layout: std::sync::Arc::new(layout),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.layout_len
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Seeded He-normal initialization.
    pub fn init_params<F: Scalar>(&self, seed: u64) -> Vec<F> {
        self.layout.initialize(&mut rng_from(seed, &[tag::INIT]))
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        let m = 1usize << self.config.depth;
        if c != self.config.in_channels {
            return Err(Error::config(format!(
                "input has {c} channels, network expects {}",
                self.config.in_channels
            )));
        }
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "spatial size {h}x{w} is not divisible by 2^depth = {m}"
            )));
        }
        Ok(())
    }

    pub fn encode<F: Scalar>(
        &self,
        params: &[F],
        x: &Tensor<F>,
    ) -> Result<(FeaturePyramid<F>, EncoderTape<F>)> {
        self.check_input(x.shape())?;
        let mut blocks = Vec::with_capacity(self.enc.len());
        let mut pools = Vec::with_capacity(self.config.depth);
        let mut skips = Vec::with_capacity(self.config.depth);
        let (mut cur, tape) = self.enc[0].forward(params, x.clone());
        blocks.push(tape);
        for block in &self.enc[1..] {
            let (pooled, idx) = max_pool2(&cur);
            pools.push((idx, cur.shape()));
            skips.push(cur);
            let (next, tape) = block.forward(params, pooled);
            blocks.push(tape);
            cur = next;
        }
        Ok((
            FeaturePyramid {
                skips,
                bottleneck: cur,
            },
            EncoderTape { blocks, pools },
        ))
    }

    pub fn encode_backward<F: Scalar>(
        &self,
        params: &[F],
        grads: &mut [F],
        tape: &EncoderTape<F>,
        dpyr: &FeaturePyramid<F>,
    ) {
        let mut d = dpyr.bottleneck.clone();
        for level in (1..=self.config.depth).rev() {
            let dpooled = self.enc[level].backward(params, grads, &tape.blocks[level], &d);
            let (idx, shape) = &tape.pools[level - 1];
            d = max_pool2_backward(idx, *shape, &dpooled);
            d.add_assign(&dpyr.skips[level - 1]);
        }
        self.enc[0].backward(params, grads, &tape.blocks[0], &d);
    }

    pub fn decode<F: Scalar>(&self, params: &[F], pyr: &FeaturePyramid<F>) -> (Tensor<F>, DecoderTape<F>) {
        let mut cur = pyr.bottleneck.clone();
        let mut blocks = Vec::with_capacity(self.config.depth);
        for level in (0..self.config.depth).rev() {
            let up = upsample2(&cur);
            let cat = concat_channels(&up, &pyr.skips[level]);
            let (next, tape) = self.dec[level].forward(params, cat);
            blocks.push(tape);
            cur = next;
        }
        let logits = self.head.forward(params, &cur);
        (
            logits,
            DecoderTape {
                blocks,
                head_input: cur,
            },
        )
    }

    pub fn decode_backward<F: Scalar>(
        &self,
        params: &[F],
        grads: &mut [F],
        tape: &DecoderTape<F>,
        dlogits: &Tensor<F>,
    ) -> FeaturePyramid<F> {
        let depth = self.config.depth;
        let mut d = self.head.backward(params, grads, &tape.head_input, dlogits);
        let mut skips = vec![Tensor::zeros([0, 0, 0, 0]); depth];
        for level in 0..depth {
            let block_tape = &tape.blocks[depth - 1 - level];
            let dcat = self.dec[level].backward(params, grads, block_tape, &d);
            let (dup, dskip) = split_channels(&dcat, self.config.width(level + 1));
            skips[level] = dskip;
            d = upsample2_backward(&dup);
        }
        FeaturePyramid {
            skips,
            bottleneck: d,
        }
    }

    /// Plain encode → decode, used for labeled batches and evaluation.
    pub fn forward_supervised<F: Scalar>(
        &self,
        params: &[F],
        x: &Tensor<F>,
    ) -> Result<(Tensor<F>, SupervisedTape<F>)> {
        let (pyr, enc) = self.encode(params, x)?;
        let (logits, dec) = self.decode(params, &pyr);
        Ok((logits, SupervisedTape { enc, dec }))
    }

    pub fn backward_supervised<F: Scalar>(
        &self,
        params: &[F],
        grads: &mut [F],
        tape: &SupervisedTape<F>,
        dlogits: &Tensor<F>,
    ) {
        let dpyr = self.decode_backward(params, grads, &tape.dec, dlogits);
        self.encode_backward(params, grads, &tape.enc, &dpyr);
    }

    /// Unperturbed logits without keeping a tape, in chunks of `chunk` samples.
    pub fn predict<F: Scalar>(&self, params: &[F], x: &Tensor<F>, chunk: usize) -> Result<Tensor<F>> {
        let n = x.batch();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = chunk.max(1).min(n - start);
            let (pyr, _) = self.encode(params, &x.slice_batch(start, len))?;
            parts.push(self.decode(params, &pyr).0);
            start += len;
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros([0, self.config.num_classes, x.height(), x.width()]));
        }
        Ok(Tensor::concat_batch(&parts.iter().collect::<Vec<_>>()))
    }

    /// Run the unlabeled views through the network and produce every stream in `plan`.
    ///
    /// Stacked mode encodes `{x_w, x_s2}` in one call and `x_s1` in a second,
    /// then decodes every (view, perturbation) block in one batch-stacked
    /// call. Naive mode issues one encoder call per view and one decoder call
    /// per stream. Both modes derive each block's dropout from the same
    /// per-stream seed and produce identical maps.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_streams<F: Scalar>(
        &self,
        params: &[F],
        views: &ViewBatch<F>,
        plan: &StreamPlan,
        perturb: &PerturbConfig,
        step_seed: u64,
        mode: ExecMode,
        counters: &mut Invocations,
    ) -> Result<(StreamSet<F>, StreamTape<F>)> {
        let groups = plan.encoder_groups();
        let b = views.weak.batch();
        for view in plan.views() {
            if views.get(view).batch() != b {
                return Err(Error::internal("view batches differ in size"));
            }
        }
        let calls: Vec<Vec<View>> = match mode {
            ExecMode::Stacked => groups,
            ExecMode::Naive => groups.into_iter().flatten().map(|v| vec![v]).collect(),
        };

        let mut pyramids: BTreeMap<View, FeaturePyramid<F>> = BTreeMap::new();
        let mut enc_tapes = Vec::with_capacity(calls.len());
        for call in &calls {
            let input = Tensor::concat_batch(&call.iter().map(|&v| views.get(v)).collect::<Vec<_>>());
            let (pyr, tape) = self.encode(params, &input)?;
            counters.encoder += 1;
            for (i, &v) in call.iter().enumerate() {
                pyramids.insert(v, pyr.slice(i * b, b));
            }
            enc_tapes.push((call.clone(), tape));
        }

        let mut maps = BTreeMap::new();
        let dec = match mode {
            ExecMode::Stacked => {
                let sources: Vec<(View, &FeaturePyramid<F>)> =
                    pyramids.iter().map(|(&v, p)| (v, p)).collect();
                let (stacked, ptapes) = stack_for_decoder(&sources, plan.streams(), perturb, step_seed)?;
                let (logits, tape) = self.decode(params, &stacked.pyramid);
                counters.decoder += 1;
                for (stream, block) in unstack(&logits, &stacked.index)? {
                    maps.insert(stream, block);
                }
                DecodeTapes::Stacked {
                    tape,
                    index: stacked.index,
                    perturb: ptapes,
                }
            }
            ExecMode::Naive => {
                let mut per_block = Vec::with_capacity(plan.streams().len());
                for &stream in plan.streams() {
                    let src = &pyramids[&stream.view()];
                    let (pyr, ptape) = perturb_block(src, stream, perturb, step_seed)?;
                    let (logits, tape) = self.decode(params, &pyr);
                    counters.decoder += 1;
                    maps.insert(stream, logits);
                    per_block.push((stream, tape, ptape));
                }
                DecodeTapes::Naive(per_block)
            }
        };
        Ok((
            StreamSet {
                maps,
                mix_s1: views.mix_s1.clone(),
                mix_s2: views.mix_s2.clone(),
            },
            StreamTape {
                batch: b,
                encoders: enc_tapes,
                decoders: dec,
                templates: pyramids.into_iter().map(|(v, p)| (v, p.zeros_like())).collect(),
            },
        ))
    }

    /// Backpropagate stream logit gradients into `grads`. Streams missing
    /// from `dlogits` contribute zero gradient.
    pub fn backward_streams<F: Scalar>(
        &self,
        params: &[F],
        grads: &mut [F],
        tape: &StreamTape<F>,
        dlogits: &BTreeMap<Stream, Tensor<F>>,
    ) -> Result<()> {
        let mut dviews: BTreeMap<View, FeaturePyramid<F>> = tape.templates.clone();
        let grad_for = |stream: Stream, shape: [usize; 4]| -> Tensor<F> {
            dlogits
                .get(&stream)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(shape))
        };
        match &tape.decoders {
            DecodeTapes::Stacked {
                tape: dtape,
                index,
                perturb,
            } => {
                let shape = [
                    tape.batch,
                    self.config.num_classes,
                    dtape.head_input.height(),
                    dtape.head_input.width(),
                ];
                let parts: Vec<Tensor<F>> = index
                    .entries()
                    .iter()
                    .map(|e| grad_for(e.stream, shape))
                    .collect();
                let stacked = Tensor::concat_batch(&parts.iter().collect::<Vec<_>>());
                let dpyr = self.decode_backward(params, grads, dtape, &stacked);
                for (entry, ptape) in index.entries().iter().zip(perturb) {
                    let mut block = dpyr.slice(entry.start, entry.len);
                    block.bottleneck = perturb_backward(ptape, &block.bottleneck);
                    dviews
                        .get_mut(&entry.stream.view())
                        .ok_or_else(|| Error::internal("stream view was not encoded"))?
                        .add_assign(&block);
                }
            }
            DecodeTapes::Naive(blocks) => {
                for (stream, dtape, ptape) in blocks {
                    let shape = [
                        tape.batch,
                        self.config.num_classes,
                        dtape.head_input.height(),
                        dtape.head_input.width(),
                    ];
                    let mut block = self.decode_backward(params, grads, dtape, &grad_for(*stream, shape));
                    block.bottleneck = perturb_backward(ptape, &block.bottleneck);
                    dviews
                        .get_mut(&stream.view())
                        .ok_or_else(|| Error::internal("stream view was not encoded"))?
                        .add_assign(&block);
                }
            }
        }
        for (call, etape) in &tape.encoders {
            let parts: Vec<&FeaturePyramid<F>> = call.iter().map(|v| &dviews[v]).collect();
            let dpyr = FeaturePyramid::concat(&parts);
            self.encode_backward(params, grads, etape, &dpyr);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SupervisedTape<F> {
    enc: EncoderTape<F>,
    dec: DecoderTape<F>,
}

/// Image-level view of an unlabeled sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    /// `x^w`
    Weak,
    /// `x^{s2}`; its features are `h_s`, the strong-encoder source.
    Strong2,
    /// `x^{s1}`
    Strong1,
}

/// Feature perturbation applied at the bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    None,
    Weak,
    Strong,
}

/// The seven prediction streams. Declaration order is the canonical block order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stream {
    /// `p^w_n`, the teacher.
    #[serde(rename = "p_w_n")]
    WeakPlain,
    /// `p^w_w`
    #[serde(rename = "p_w_w")]
    WeakWeak,
    /// `p^w_s`
    #[serde(rename = "p_w_s")]
    WeakStrong,
    /// `p^s_w`
    #[serde(rename = "p_s_w")]
    StrongWeak,
    /// `p^s_s`
    #[serde(rename = "p_s_s")]
    StrongStrong,
    /// `p^{s2}`, decoded from `h_s` without perturbation.
    #[serde(rename = "p_s2")]
    Strong2,
    /// `p^{s1}`
    #[serde(rename = "p_s1")]
    Strong1,
}

impl Stream {
    pub const ALL: [Stream; 7] = [
        Stream::WeakPlain,
        Stream::WeakWeak,
        Stream::WeakStrong,
        Stream::StrongWeak,
        Stream::StrongStrong,
        Stream::Strong2,
        Stream::Strong1,
    ];

    pub fn view(self) -> View {
        match self {
            Stream::WeakPlain | Stream::WeakWeak | Stream::WeakStrong => View::Weak,
            Stream::StrongWeak | Stream::StrongStrong | Stream::Strong2 => View::Strong2,
            Stream::Strong1 => View::Strong1,
        }
    }

    pub fn perturbation(self) -> Perturbation {
        match self {
            Stream::WeakWeak | Stream::StrongWeak => Perturbation::Weak,
            Stream::WeakStrong | Stream::StrongStrong => Perturbation::Strong,
            _ => Perturbation::None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::WeakPlain => "p_w_n",
            Stream::WeakWeak => "p_w_w",
            Stream::WeakStrong => "p_w_s",
            Stream::StrongWeak => "p_s_w",
            Stream::StrongStrong => "p_s_s",
            Stream::Strong2 => "p_s2",
            Stream::Strong1 => "p_s1",
        }
    }

    pub fn index(self) -> u64 {
        self as u64
    }
}

/// Which streams a step computes, in canonical order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamPlan {
    streams: Vec<Stream>,
}

impl StreamPlan {
    pub fn new(mut streams: Vec<Stream>) -> Result<Self> {
        streams.sort();
        streams.dedup();
        if !streams.is_empty() && streams[0] != Stream::WeakPlain {
            return Err(Error::config("every stream plan needs the teacher p_w_n"));
        }
        Ok(StreamPlan { streams })
    }

    pub fn crossmatch() -> Self {
        StreamPlan {
            streams: Stream::ALL.to_vec(),
        }
    }

    /// Teacher plus one strong image view, no feature perturbation.
    pub fn fixmatch() -> Self {
        StreamPlan {
            streams: vec![Stream::WeakPlain, Stream::Strong1],
        }
    }

    pub fn streams(&self) -> &[Stream] {
        &self.streams
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn views(&self) -> Vec<View> {
        let mut v: Vec<View> = self.streams.iter().map(|s| s.view()).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Stacked encoder calls: `{x_w, x_s2}` together, `x_s1` on its own;
    /// without `x_s2`, `x_s1` joins the weak view.
    pub fn encoder_groups(&self) -> Vec<Vec<View>> {
        let views = self.views();
        if views.contains(&View::Strong2) {
            let mut groups = vec![vec![View::Weak, View::Strong2]];
            if views.contains(&View::Strong1) {
                groups.push(vec![View::Strong1]);
            }
            groups
        } else if views.is_empty() {
            vec![]
        } else {
            vec![views]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    #[default]
    Stacked,
    Naive,
}

/// Network inputs for one unlabeled batch.
#[derive(Clone, Debug)]
pub struct ViewBatch<F> {
    pub weak: Tensor<F>,
    pub strong1: Tensor<F>,
    pub strong2: Tensor<F>,
    pub mix_s1: Vec<Option<ViewMix>>,
    pub mix_s2: Vec<Option<ViewMix>>,
}

impl<F: Scalar> ViewBatch<F> {
    pub fn get(&self, view: View) -> &Tensor<F> {
        match view {
            View::Weak => &self.weak,
            View::Strong1 => &self.strong1,
            View::Strong2 => &self.strong2,
        }
    }
}

/// Logit maps per stream, plus the CutMix boxes applied to each strong view.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamSet<F> {
    pub maps: BTreeMap<Stream, Tensor<F>>,
    pub mix_s1: Vec<Option<ViewMix>>,
    pub mix_s2: Vec<Option<ViewMix>>,
}

impl<F: Scalar> StreamSet<F> {
    pub fn get(&self, stream: Stream) -> Result<&Tensor<F>> {
        self.maps
            .get(&stream)
            .ok_or_else(|| Error::config(format!("stream {} was not computed", stream.name())))
    }

    /// CutMix boxes relevant to a stream's image view.
    pub fn mixing_for(&self, stream: Stream) -> Option<&[Option<ViewMix>]> {
        match stream.view() {
            View::Weak => None,
            View::Strong1 => Some(&self.mix_s1),
            View::Strong2 => Some(&self.mix_s2),
        }
    }

    pub fn without_mixing(maps: BTreeMap<Stream, Tensor<F>>) -> Self {
        StreamSet {
            maps,
            mix_s1: Vec::new(),
            mix_s2: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
enum DecodeTapes<F> {
    Stacked {
        tape: DecoderTape<F>,
        index: BlockIndex,
        perturb: Vec<PerturbTape<F>>,
    },
    Naive(Vec<(Stream, DecoderTape<F>, PerturbTape<F>)>),
}

#[derive(Clone, Debug)]
pub struct StreamTape<F> {
    batch: usize,
    encoders: Vec<(Vec<View>, EncoderTape<F>)>,
    decoders: DecodeTapes<F>,
    templates: BTreeMap<View, FeaturePyramid<F>>,
}
