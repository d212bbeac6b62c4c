//! Layers with explicit forward/backward passes.
//!
//! Parameters live in one flat vector owned by the caller; a layer only knows
//! the [`ParamSlot`]s it reads. Backward passes accumulate parameter gradients
//! sample by sample in batch order, so a batch of `k·B` samples produces the
//! same gradient bits as `k` consecutive calls on `B`-sample blocks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::{matmul, matmul_at, matmul_bt, Scalar, Tensor};

/// A contiguous range inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub offset: usize,
    pub len: usize,
}

impl ParamSlot {
    pub fn of<'a, F>(&self, params: &'a [F]) -> &'a [F] {
        &params[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a, F>(&self, params: &'a mut [F]) -> &'a mut [F] {
        &mut params[self.offset..self.offset + self.len]
    }
}

/// Hands out consecutive parameter slots and records their names and init rule.
#[derive(Debug, Default)]
pub struct ParamLayout {
    pub entries: Vec<(String, ParamSlot, Init)>,
    total: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He-normal with the given fan-in.
    HeNormal(usize),
    Zeros,
    Ones,
}

impl ParamLayout {
    pub fn alloc(&mut self, name: impl Into<String>, len: usize, init: Init) -> ParamSlot {
        let slot = ParamSlot {
            offset: self.total,
            len,
        };
        self.total += len;
        self.entries.push((name.into(), slot, init));
        slot
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn initialize<F: Scalar>(&self, rng: &mut impl Rng) -> Vec<F> {
        let mut out = vec![F::zero(); self.total];
        for (_, slot, init) in &self.entries {
            let dst = slot.of_mut(&mut out);
            match *init {
                Init::Zeros => {}
                Init::Ones => dst.fill(F::one()),
                Init::HeNormal(fan_in) => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    for v in dst.iter_mut() {
                        *v = F::from_f64_lossy(normal.sample(rng));
                    }
                }
            }
        }
        out
    }
}

/// Same-padded 2-D convolution with odd square kernel and unit stride.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: ParamSlot,
    pub bias: ParamSlot,
}

fn im2col<F: Scalar>(x: &[F], c: usize, h: usize, w: usize, k: usize, cols: &mut [F]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        drow.fill(F::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    drow[..x0].fill(F::zero());
                    drow[x1..].fill(F::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im<F: Scalar>(cols: &[F], c: usize, h: usize, w: usize, k: usize, dx_out: &mut [F]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    dx_out.fill(F::zero());
    for ci in 0..c {
        let dst = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let drow = &mut dst[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, &s) in drow.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

impl Conv2d {
    pub fn new(layout: &mut ParamLayout, name: &str, in_c: usize, out_c: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_c * kernel * kernel;
        Conv2d {
            in_channels: in_c,
            out_channels: out_c,
            kernel,
            weight: layout.alloc(format!("{name}.weight"), out_c * fan_in, Init::HeNormal(fan_in)),
            bias: layout.alloc(format!("{name}.bias"), out_c, Init::Zeros),
        }
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward<F: Scalar>(&self, params: &[F], x: &Tensor<F>) -> Tensor<F> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let hw = h * w;
        let rows = self.col_rows();
        let weight = self.weight.of(params);
        let bias = self.bias.of(params);
        let mut out = Tensor::zeros([n, self.out_channels, h, w]);
        let out_len = self.out_channels * hw;
        out.data_mut()
            .par_chunks_mut(out_len)
            .enumerate()
            .for_each_init(
                || vec![F::zero(); if self.kernel == 1 { 0 } else { rows * hw }],
                |cols, (s, o)| {
                    for (oc, chunk) in o.chunks_mut(hw).enumerate() {
                        chunk.fill(bias[oc]);
                    }
                    let xs = x.sample(s);
                    let b: &[F] = if self.kernel == 1 {
                        xs
                    } else {
                        im2col(xs, c, h, w, self.kernel, cols);
                        cols
                    };
                    matmul(self.out_channels, rows, hw, weight, b, F::one(), o);
                },
            );
        out
    }

    /// Returns the input gradient; accumulates weight and bias gradients into `grads`.
    pub fn backward<F: Scalar>(
        &self,
        params: &[F],
        grads: &mut [F],
        x: &Tensor<F>,
        dy: &Tensor<F>,
    ) -> Tensor<F> {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let rows = self.col_rows();
        let weight = self.weight.of(params);
        let mut dx = Tensor::zeros(x.shape());
        let in_len = c * hw;
        dx.data_mut()
            .par_chunks_mut(in_len)
            .enumerate()
            .for_each_init(
                || vec![F::zero(); if self.kernel == 1 { 0 } else { rows * hw }],
                |dcols, (s, d)| {
                    let dys = dy.sample(s);
                    if self.kernel == 1 {
                        matmul_at(rows, self.out_channels, hw, weight, dys, F::zero(), d);
                    } else {
                        matmul_at(rows, self.out_channels, hw, weight, dys, F::zero(), dcols);
                        col2im(dcols, c, h, w, self.kernel, d);
                    }
                },
            );

        let mut cols = vec![F::zero(); if self.kernel == 1 { 0 } else { rows * hw }];
        for s in 0..n {
            let dys = dy.sample(s);
            let xs = x.sample(s);
            let b: &[F] = if self.kernel == 1 {
                xs
            } else {
                im2col(xs, c, h, w, self.kernel, &mut cols);
                &cols
            };
            matmul_bt(
                self.out_channels,
                hw,
                rows,
                dys,
                b,
                F::one(),
                self.weight.of_mut(grads),
            );
            let db = self.bias.of_mut(grads);
            for (oc, chunk) in dys.chunks(hw).enumerate() {
                db[oc] += chunk.iter().copied().sum::<F>();
            }
        }
        dx
    }
}

/// Feature normalization flavour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Group,
    Instance,
    /// Per-channel statistics over the whole batch (no running averages);
    /// couples samples that share a forward call.
    Batch,
}

/// Saved state for [`Norm::backward`].
#[derive(Clone, Debug)]
pub struct NormCache<F> {
    xhat: Tensor<F>,
    inv_std: Vec<F>,
}

/// Group, instance, or batch normalization with learned affine.
#[derive(Clone, Debug)]
pub struct Norm {
    kind: Normalization,
    channels: usize,
    groups: usize,
    pub gamma: ParamSlot,
    pub beta: ParamSlot,
}

const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn new(layout: &mut ParamLayout, name: &str, kind: Normalization, channels: usize, groups: usize) -> Self {
        let groups = match kind {
            Normalization::Group => groups,
            Normalization::Instance => channels,
            Normalization::Batch => 1,
        };
        assert!(channels % groups == 0, "groups must divide channels");
        Norm {
            kind,
            channels,
            groups,
            gamma: layout.alloc(format!("{name}.gamma"), channels, Init::Ones),
            beta: layout.alloc(format!("{name}.beta"), channels, Init::Zeros),
        }
    }

    pub fn forward<F: Scalar>(&self, params: &[F], x: &Tensor<F>) -> (Tensor<F>, NormCache<F>) {
        match self.kind {
            Normalization::Batch => self.forward_batch(params, x),
            _ => self.forward_grouped(params, x),
        }
    }

    fn forward_grouped<F: Scalar>(&self, params: &[F], x: &Tensor<F>) -> (Tensor<F>, NormCache<F>) {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let cg = c / self.groups;
        let group_len = cg * hw;
        let count = F::from_usize(group_len).unwrap();
        let eps = F::from_f64_lossy(NORM_EPS);
        let gamma = self.gamma.of(params);
        let beta = self.beta.of(params);
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = vec![F::zero(); n * self.groups];
        xhat.data_mut()
            .par_chunks_mut(group_len)
            .zip(y.data_mut().par_chunks_mut(group_len))
            .zip(inv_std.par_iter_mut())
            .zip(x.data().par_chunks(group_len))
            .enumerate()
            .for_each(|(gi, (((xh, yy), inv), xs))| {
                let g = gi % self.groups;
                let mean = xs.iter().copied().sum::<F>() / count;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / count;
                let is = F::one() / (var + eps).sqrt();
                *inv = is;
                for (ci, ((xhc, yc), xc)) in xh
                    .chunks_mut(hw)
                    .zip(yy.chunks_mut(hw))
                    .zip(xs.chunks(hw))
                    .enumerate()
                {
                    let ch = g * cg + ci;
                    for ((a, b), &v) in xhc.iter_mut().zip(yc.iter_mut()).zip(xc) {
                        *a = (v - mean) * is;
                        *b = gamma[ch] * *a + beta[ch];
                    }
                }
            });
        (y, NormCache { xhat, inv_std })
    }

    fn forward_batch<F: Scalar>(&self, params: &[F], x: &Tensor<F>) -> (Tensor<F>, NormCache<F>) {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let count = F::from_usize(n * hw).unwrap();
        let eps = F::from_f64_lossy(NORM_EPS);
        let gamma = self.gamma.of(params);
        let beta = self.beta.of(params);
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = vec![F::zero(); c];
        for ch in 0..c {
            let mut sum = F::zero();
            for s in 0..n {
                sum += x.sample(s)[ch * hw..(ch + 1) * hw].iter().copied().sum::<F>();
            }
            let mean = sum / count;
            let mut var = F::zero();
            for s in 0..n {
                var += x.sample(s)[ch * hw..(ch + 1) * hw]
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<F>();
            }
            let is = F::one() / (var / count + eps).sqrt();
            inv_std[ch] = is;
            for s in 0..n {
                let base = s * c * hw + ch * hw;
                for i in base..base + hw {
                    let xh = (x.data()[i] - mean) * is;
                    xhat.data_mut()[i] = xh;
                    y.data_mut()[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward<F: Scalar>(
        &self,
        params: &[F],
        grads: &mut [F],
        cache: &NormCache<F>,
        dy: &Tensor<F>,
    ) -> Tensor<F> {
        let [n, c, h, w] = dy.shape();
        let hw = h * w;
        let gamma = self.gamma.of(params);
        // affine gradients, sample-ordered
        for s in 0..n {
            let dys = dy.sample(s);
            let xhs = cache.xhat.sample(s);
            for ch in 0..c {
                let r = ch * hw..(ch + 1) * hw;
                let dg: F = dys[r.clone()].iter().zip(&xhs[r.clone()]).map(|(&a, &b)| a * b).sum();
                let db: F = dys[r].iter().copied().sum();
                self.gamma.of_mut(grads)[ch] += dg;
                self.beta.of_mut(grads)[ch] += db;
            }
        }
        let mut dx = Tensor::zeros(dy.shape());
        match self.kind {
            Normalization::Batch => {
                let count = F::from_usize(n * hw).unwrap();
                for ch in 0..c {
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for s in 0..n {
                        let base = s * c * hw + ch * hw;
                        for i in base..base + hw {
                            let d = dy.data()[i] * gamma[ch];
                            s1 += d;
                            s2 += d * cache.xhat.data()[i];
                        }
                    }
                    let is = cache.inv_std[ch];
                    for s in 0..n {
                        let base = s * c * hw + ch * hw;
                        for i in base..base + hw {
                            let d = dy.data()[i] * gamma[ch];
                            dx.data_mut()[i] =
                                is * (d - s1 / count - cache.xhat.data()[i] * s2 / count);
                        }
                    }
                }
            }
            _ => {
                let cg = c / self.groups;
                let group_len = cg * hw;
                let count = F::from_usize(group_len).unwrap();
                dx.data_mut()
                    .par_chunks_mut(group_len)
                    .zip(dy.data().par_chunks(group_len))
                    .zip(cache.xhat.data().par_chunks(group_len))
                    .enumerate()
                    .for_each(|(gi, ((dxg, dyg), xhg))| {
                        let g = gi % self.groups;
                        let is = cache.inv_std[gi];
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for (i, (&d, &xh)) in dyg.iter().zip(xhg).enumerate() {
                            let dd = d * gamma[g * cg + i / hw];
                            s1 += dd;
                            s2 += dd * xh;
                        }
                        for (i, ((o, &d), &xh)) in dxg.iter_mut().zip(dyg).zip(xhg).enumerate() {
                            let dd = d * gamma[g * cg + i / hw];
                            *o = is * (dd - s1 / count - xh * s2 / count);
                        }
                    });
            }
        }
        dx
    }
}

pub fn relu<F: Scalar>(x: Tensor<F>) -> Tensor<F> {
    let mut x = x;
    for v in x.data_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
    x
}

/// `out` is the ReLU output saved from the forward pass.
pub fn relu_backward<F: Scalar>(out: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = dy.clone();
    for (d, &o) in dx.data_mut().iter_mut().zip(out.data()) {
        if o <= F::zero() {
            *d = F::zero();
        }
    }
    dx
}

/// 2×2 max pooling, stride 2. Returns the argmax offsets for the backward pass.
pub fn max_pool2<F: Scalar>(x: &Tensor<F>) -> (Tensor<F>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut idx = vec![0u32; n * c * oh * ow];
    let src = x.data();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (2 * y) * w + 2 * xx;
                let mut best_v = src[base + best];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let p = (2 * y + dy) * w + 2 * xx + dx;
                    if src[base + p] > best_v {
                        best_v = src[base + p];
                        best = p;
                    }
                }
                out.data_mut()[o] = best_v;
                idx[o] = best as u32;
                o += 1;
            }
        }
    }
    (out, idx)
}

pub fn max_pool2_backward<F: Scalar>(idx: &[u32], input_shape: [usize; 4], dy: &Tensor<F>) -> Tensor<F> {
    let [_, _, h, w] = input_shape;
    let out_plane = dy.plane();
    let mut dx = Tensor::zeros(input_shape);
    for (o, (&i, &d)) in idx.iter().zip(dy.data()).enumerate() {
        let plane = o / out_plane;
        dx.data_mut()[plane * h * w + i as usize] += d;
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for y in 0..oh {
            let srow = &src[plane * h * w + (y / 2) * w..][..w];
            let drow = &mut dst[plane * oh * ow + y * ow..][..ow];
            for (xx, d) in drow.iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<F: Scalar>(dy: &Tensor<F>) -> Tensor<F> {
    let [n, c, oh, ow] = dy.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let src = dy.data();
    let dst = dx.data_mut();
    for plane in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                dst[plane * h * w + (y / 2) * w + xx / 2] += src[plane * oh * ow + y * ow + xx];
            }
        }
    }
    dx
}

/// Channel concatenation `[a; b]` per sample.
pub fn concat_channels<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let [n, ca, h, w] = a.shape();
    let cb = b.channels();
    assert_eq!(b.shape(), [n, cb, h, w], "concat_channels shape mismatch");
    let mut data = Vec::with_capacity(a.len() + b.len());
    for s in 0..n {
        data.extend_from_slice(a.sample(s));
        data.extend_from_slice(b.sample(s));
    }
    Tensor::from_vec([n, ca + cb, h, w], data)
}

pub fn split_channels<F: Scalar>(x: &Tensor<F>, ca: usize) -> (Tensor<F>, Tensor<F>) {
    let [n, c, h, w] = x.shape();
    let cb = c - ca;
    let split = ca * h * w;
    let mut a = Vec::with_capacity(n * split);
    let mut b = Vec::with_capacity(n * cb * h * w);
    for s in 0..n {
        let xs = x.sample(s);
        a.extend_from_slice(&xs[..split]);
        b.extend_from_slice(&xs[split..]);
    }
    (
        Tensor::from_vec([n, ca, h, w], a),
        Tensor::from_vec([n, cb, h, w], b),
    )
}

/// conv → norm → relu → conv → norm → relu.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    conv1: Conv2d,
    norm1: Norm,
    conv2: Conv2d,
    norm2: Norm,
}

#[derive(Clone, Debug)]
pub struct ConvBlockTape<F> {
    input: Tensor<F>,
    n1: NormCache<F>,
    r1: Tensor<F>,
    n2: NormCache<F>,
    r2: Tensor<F>,
}

impl ConvBlock {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_c: usize,
        out_c: usize,
        norm: Normalization,
        groups: usize,
    ) -> Self {
        ConvBlock {
            conv1: Conv2d::new(layout, &format!("{name}.conv1"), in_c, out_c, 3),
            norm1: Norm::new(layout, &format!("{name}.norm1"), norm, out_c, groups),
            conv2: Conv2d::new(layout, &format!("{name}.conv2"), out_c, out_c, 3),
            norm2: Norm::new(layout, &format!("{name}.norm2"), norm, out_c, groups),
        }
    }

    pub fn forward<F: Scalar>(&self, params: &[F], x: Tensor<F>) -> (Tensor<F>, ConvBlockTape<F>) {
        let a1 = self.conv1.forward(params, &x);
        let (b1, n1) = self.norm1.forward(params, &a1);
        let r1 = relu(b1);
        let a2 = self.conv2.forward(params, &r1);
        let (b2, n2) = self.norm2.forward(params, &a2);
        let r2 = relu(b2);
        (
            r2.clone(),
            ConvBlockTape {
                input: x,
                n1,
                r1,
                n2,
                r2,
            },
        )
    }

    pub fn backward<F: Scalar>(
        &self,
        params: &[F],
        grads: &mut [F],
        tape: &ConvBlockTape<F>,
        dy: &Tensor<F>,
    ) -> Tensor<F> {
        let d = relu_backward(&tape.r2, dy);
        let d = self.norm2.backward(params, grads, &tape.n2, &d);
        let d = self.conv2.backward(params, grads, &tape.r1, &d);
        let d = relu_backward(&tape.r1, &d);
        let d = self.norm1.backward(params, grads, &tape.n1, &d);
        self.conv1.backward(params, grads, &tape.input, &d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = rng_from(seed, &[]);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Finite-difference check of a scalar objective `sum(w ⊙ f(params, x))`.
    fn check_layer(
        n_params: usize,
        params: &mut Vec<f64>,
        x: &Tensor<f64>,
        forward: &dyn Fn(&[f64], &Tensor<f64>) -> Tensor<f64>,
        backward: &dyn Fn(&[f64], &mut [f64], &Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
    ) {
        let y = forward(params, x);
        let wts = random_tensor(y.shape(), 99);
        let objective = |p: &[f64], xx: &Tensor<f64>| -> f64 {
            forward(p, xx).data().iter().zip(wts.data()).map(|(a, b)| a * b).sum()
        };
        let mut grads = vec![0.0; n_params];
        let dx = backward(params, &mut grads, x, &wts);
        let eps = 1e-6;
        for i in 0..n_params {
            let orig = params[i];
            params[i] = orig + eps;
            let up = objective(params, x);
            params[i] = orig - eps;
            let down = objective(params, x);
            params[i] = orig;
            let num = (up - down) / (2.0 * eps);
            assert!((num - grads[i]).abs() <= 1e-6 * (1.0 + num.abs()), "param {i}: {num} vs {}", grads[i]);
        }
        let mut xp = x.clone();
        for i in 0..x.len() {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + eps;
            let up = objective(params, &xp);
            xp.data_mut()[i] = orig - eps;
            let down = objective(params, &xp);
            xp.data_mut()[i] = orig;
            let num = (up - down) / (2.0 * eps);
            assert!((num - dx.data()[i]).abs() <= 1e-6 * (1.0 + num.abs()), "input {i}: {num} vs {}", dx.data()[i]);
        }
    }

    #[test]
    fn conv3x3_gradients_match_finite_differences() {
        let mut layout = ParamLayout::default();
        let conv = Conv2d::new(&mut layout, "c", 2, 3, 3);
        let mut params: Vec<f64> = layout.initialize(&mut rng_from(1, &[]));
        for v in conv.bias.of_mut(&mut params) {
            *v = 0.3;
        }
        let x = random_tensor([2, 2, 4, 5], 2);
        check_layer(
            layout.total(),
            &mut params,
            &x,
            &|p, x| conv.forward(p, x),
            &|p, g, x, dy| conv.backward(p, g, x, dy),
        );
    }

    #[test]
    fn conv1x1_gradients_match_finite_differences() {
        let mut layout = ParamLayout::default();
        let conv = Conv2d::new(&mut layout, "c", 3, 2, 1);
        let mut params: Vec<f64> = layout.initialize(&mut rng_from(3, &[]));
        let x = random_tensor([2, 3, 3, 3], 4);
        check_layer(
            layout.total(),
            &mut params,
            &x,
            &|p, x| conv.forward(p, x),
            &|p, g, x, dy| conv.backward(p, g, x, dy),
        );
    }

    #[test]
    fn norm_gradients_match_finite_differences() {
        for kind in [Normalization::Group, Normalization::Instance, Normalization::Batch] {
            let mut layout = ParamLayout::default();
            let norm = Norm::new(&mut layout, "n", kind, 4, 2);
            let mut params: Vec<f64> = layout.initialize(&mut rng_from(5, &[]));
            let mut rng = rng_from(6, &[]);
            for v in params.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
            let x = random_tensor([3, 4, 3, 3], 7);
            check_layer(
                layout.total(),
                &mut params,
                &x,
                &|p, x| norm.forward(p, x).0,
                &|p, g, x, dy| {
                    let (_, cache) = norm.forward(p, x);
                    norm.backward(p, g, &cache, dy)
                },
            );
        }
    }

    #[test]
    fn conv_block_gradients_match_finite_differences() {
        let mut layout = ParamLayout::default();
        let block = ConvBlock::new(&mut layout, "b", 2, 4, Normalization::Group, 2);
        let mut params: Vec<f64> = layout.initialize(&mut rng_from(8, &[]));
        let x = random_tensor([2, 2, 4, 4], 9);
        check_layer(
            layout.total(),
            &mut params,
            &x,
            &|p, x| block.forward(p, x.clone()).0,
            &|p, g, x, dy| {
                let (_, tape) = block.forward(p, x.clone());
                block.backward(p, g, &tape, dy)
            },
        );
    }

    #[test]
    fn pool_upsample_concat_adjoints() {
        let x = random_tensor([2, 3, 4, 6], 10);
        let (y, idx) = max_pool2(&x);
        assert_eq!(y.shape(), [2, 3, 2, 3]);
        let dy = random_tensor(y.shape(), 11);
        let dx = max_pool2_backward(&idx, x.shape(), &dy);
        // <dy, pool(x)> == <dx, x> since pooling selects entries
        let lhs: f64 = dy.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = dx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let u = upsample2(&y);
        let du = random_tensor(u.shape(), 12);
        let back = upsample2_backward(&du);
        let lhs: f64 = du.data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = back.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let a = random_tensor([2, 2, 3, 3], 13);
        let b = random_tensor([2, 1, 3, 3], 14);
        let cat = concat_channels(&a, &b);
        let (a2, b2) = split_channels(&cat, 2);
        assert_eq!((a2, b2), (a, b));
    }
}
