//! Dense row-major tensors with `f32` storage.
//!
//! Reductions (dot products, norms, convolution inner sums) accumulate in
//! `f64`. The `kernel` submodule exposes the raw `f64` convolution loops the
//! segmentation head builds on.

use std::fmt;

use crate::error::{FsError, Result};
use crate::rng::Rng;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_finite(data: &[f32], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FsError::NonFinite(what.to_string()))
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(FsError::shape(format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(FsError::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        check_finite(&data, "tensor construction")?;
        Ok(Self { shape, data })
    }

    /// Rounds `f64` values to `f32` storage.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "zero-sized tensor {shape:?}");
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        assert!(value.is_finite());
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Samples `N(0, std^2)` entries.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = (rng.normal() * std) as f32;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &s) in index.iter().zip(&self.shape) {
            assert!(i < s, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * s + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f32) -> Result<()> {
        if !value.is_finite() {
            return Err(FsError::NonFinite("tensor set".into()));
        }
        let off = self.offset(index);
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(FsError::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(FsError::shape(format!(
                "expected rank-3 tensor, got {:?}",
                self.shape
            ))),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(FsError::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(&data, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    fn map(&self, op: &str, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        let data: Vec<f32> = self.data.iter().map(|&a| f(a)).collect();
        check_finite(&data, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Result<Tensor> {
        self.map("scale", |a| a * s)
    }

    pub fn add_scalar(&self, s: f32) -> Result<Tensor> {
        self.map("add_scalar", |a| a + s)
    }

    pub fn relu(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| a.max(0.0)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(FsError::shape(format!(
                "dot: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Sums over the channel axis of a `[c, h, w]` tensor, giving `[h, w]`.
    pub fn channel_sum(&self) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        let hw = h * w;
        let mut acc = vec![0.0f64; hw];
        for ch in 0..c {
            for (a, &v) in acc.iter_mut().zip(&self.data[ch * hw..(ch + 1) * hw]) {
                *a += v as f64;
            }
        }
        Tensor::from_f64(vec![h, w], &acc)
    }

    /// Block-average downsampling of the trailing two axes by integer factors.
    pub fn block_average(&self, fh: usize, fw: usize) -> Result<Tensor> {
        let (lead, h, w) = match *self.shape.as_slice() {
            [h, w] => (1, h, w),
            [c, h, w] => (c, h, w),
            _ => {
                return Err(FsError::shape(format!(
                    "block_average needs rank 2 or 3, got {:?}",
                    self.shape
                )))
            }
        };
        if fh == 0 || fw == 0 || h % fh != 0 || w % fw != 0 {
            return Err(FsError::shape(format!(
                "{h}x{w} not divisible by block {fh}x{fw}"
            )));
        }
        let (oh, ow) = (h / fh, w / fw);
        let inv = 1.0 / (fh * fw) as f64;
        let mut out = Vec::with_capacity(lead * oh * ow);
        for c in 0..lead {
            let plane = &self.data[c * h * w..(c + 1) * h * w];
            for by in 0..oh {
                for bx in 0..ow {
                    let mut acc = 0.0f64;
                    for y in by * fh..(by + 1) * fh {
                        for &v in &plane[y * w + bx * fw..y * w + (bx + 1) * fw] {
                            acc += v as f64;
                        }
                    }
                    out.push(acc * inv);
                }
            }
        }
        let shape = if self.rank() == 2 {
            vec![oh, ow]
        } else {
            vec![lead, oh, ow]
        };
        Tensor::from_f64(shape, &out)
    }
}

/// Stacks rank-3 (or rank-2, treated as one channel) tensors along channels.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let mut hw: Option<(usize, usize)> = None;
    let mut channels = 0;
    for p in parts {
        let (c, h, w) = match *p.shape() {
            [h, w] => (1, h, w),
            [c, h, w] => (c, h, w),
            _ => return Err(FsError::shape("concat_channels needs rank 2 or 3")),
        };
        match hw {
            None => hw = Some((h, w)),
            Some(s) if s != (h, w) => {
                return Err(FsError::shape(format!(
                    "concat_channels spatial mismatch {s:?} vs {:?}",
                    (h, w)
                )))
            }
            _ => {}
        }
        channels += c;
    }
    let (h, w) = hw.ok_or_else(|| FsError::shape("concat_channels of nothing"))?;
    let mut data = Vec::with_capacity(channels * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Same-size 2-D convolution with zero padding.
///
/// `weights` is `[c_out, c_in, k, k]`, `bias` is `[c_out]`, and `padding`
/// must equal `(k - 1) / 2` for odd `k`.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    let (c_in, h, w) = input.chw()?;
    let (c_out, wc_in, k) = match *weights.shape() {
        [o, i, kh, kw] if kh == kw => (o, i, kh),
        _ => {
            return Err(FsError::shape(format!(
                "conv2d weights must be [c_out, c_in, k, k], got {:?}",
                weights.shape()
            )))
        }
    };
    if wc_in != c_in {
        return Err(FsError::shape(format!(
            "conv2d input has {c_in} channels, weights expect {wc_in}"
        )));
    }
    if k % 2 == 0 || padding != (k - 1) / 2 {
        return Err(FsError::shape(format!(
            "conv2d needs odd k and padding (k-1)/2, got k={k} padding={padding}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(FsError::shape(format!(
            "conv2d bias must be [{c_out}], got {:?}",
            bias.shape()
        )));
    }
    let inp = input.to_f64();
    let wts = weights.to_f64();
    let mut out = kernel::broadcast_bias(&bias.to_f64(), h * w);
    kernel::conv_accumulate(&inp, c_in, h, w, &wts, c_in, 0, c_out, k, &mut out);
    Tensor::from_f64(vec![c_out, h, w], &out)
}

/// Two-channel softmax over `[2, h, w]` logits (channel 0 background,
/// channel 1 foreground).
pub fn softmax2(logits: &Tensor) -> Result<Tensor> {
    let (c, h, w) = logits.chw()?;
    if c != 2 {
        return Err(FsError::shape(format!("softmax2 needs 2 channels, got {c}")));
    }
    let hw = h * w;
    let l = logits.data();
    let mut out = vec![0.0f64; 2 * hw];
    for i in 0..hw {
        let (bg, fg) = kernel::softmax_pair(l[i] as f64, l[hw + i] as f64);
        out[i] = bg;
        out[hw + i] = fg;
    }
    Tensor::from_f64(vec![2, h, w], &out)
}

/// Raw `f64` loops shared by [`conv2d`] and the segmentation head.
///
/// Weight tensors are laid out `[c_out, c_total, k, k]`; the `w_cin_total`
/// and `w_cin_offset` arguments select a contiguous channel range of the
/// weight tensor so that one input block can be convolved against a slice
/// of a wider kernel.
pub mod kernel {
    pub fn broadcast_bias(bias: &[f64], hw: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(bias.len() * hw);
        for &b in bias {
            out.extend(std::iter::repeat_n(b, hw));
        }
        out
    }

    /// Returns `(p_background, p_foreground)` via max subtraction.
    #[inline]
    pub fn softmax_pair(bg: f64, fg: f64) -> (f64, f64) {
        let m = bg.max(fg);
        let eb = (bg - m).exp();
        let ef = (fg - m).exp();
        let z = eb + ef;
        (eb / z, ef / z)
    }

    /// Valid output range along one axis for kernel offset `d`.
    #[inline]
    fn span(n: usize, d: isize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (n as isize - d).min(n as isize).max(0) as usize;
        (lo, hi.max(lo))
    }

    /// `out[o] += sum_{i,ky,kx} W[o, off + i, ky, kx] * in_pad[i, y+ky-p, x+kx-p]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_accumulate(
        input: &[f64],
        c_in: usize,
        h: usize,
        w: usize,
        weights: &[f64],
        w_cin_total: usize,
        w_cin_offset: usize,
        c_out: usize,
        k: usize,
        out: &mut [f64],
    ) {
        let hw = h * w;
        let kk = k * k;
        let p = (k / 2) as isize;
        debug_assert_eq!(input.len(), c_in * hw);
        debug_assert_eq!(out.len(), c_out * hw);
        debug_assert_eq!(weights.len(), c_out * w_cin_total * kk);
        for o in 0..c_out {
            let out_o = &mut out[o * hw..(o + 1) * hw];
            for i in 0..c_in {
                let inp = &input[i * hw..(i + 1) * hw];
                let wbase = (o * w_cin_total + w_cin_offset + i) * kk;
                for ky in 0..k {
                    let dy = ky as isize - p;
                    let (y0, y1) = span(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - p;
                        let (x0, x1) = span(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = weights[wbase + ky * k + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let orow = &mut out_o[y * w + x0..y * w + x1];
                            let irow = &inp[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            for (o, &v) in orow.iter_mut().zip(irow) {
                                *o += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// `dW[o, off + i, ky, kx] += sum_{y,x} dout[o, y, x] * in_pad[i, y+ky-p, x+kx-p]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_weight_grad(
        input: &[f64],
        c_in: usize,
        h: usize,
        w: usize,
        dout: &[f64],
        c_out: usize,
        k: usize,
        w_cin_total: usize,
        w_cin_offset: usize,
        dweights: &mut [f64],
    ) {
        let hw = h * w;
        let kk = k * k;
        let p = (k / 2) as isize;
        for o in 0..c_out {
            let d_o = &dout[o * hw..(o + 1) * hw];
            for i in 0..c_in {
                let inp = &input[i * hw..(i + 1) * hw];
                let wbase = (o * w_cin_total + w_cin_offset + i) * kk;
                for ky in 0..k {
                    let dy = ky as isize - p;
                    let (y0, y1) = span(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - p;
                        let (x0, x1) = span(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            acc += dot(
                                &d_o[y * w + x0..y * w + x1],
                                &inp[sy * w + sx0..sy * w + sx0 + (x1 - x0)],
                            );
                        }
                        dweights[wbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }

    /// Gradient with respect to `c_in` input channels starting at weight
    /// channel `w_cin_offset`: `din[i, y', x'] += sum W[o, off+i, ky, kx] * dout[o, y, x]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_input_grad(
        dout: &[f64],
        c_out: usize,
        h: usize,
        w: usize,
        weights: &[f64],
        w_cin_total: usize,
        w_cin_offset: usize,
        c_in: usize,
        k: usize,
        dinput: &mut [f64],
    ) {
        let hw = h * w;
        let kk = k * k;
        let p = (k / 2) as isize;
        for o in 0..c_out {
            let d_o = &dout[o * hw..(o + 1) * hw];
            for i in 0..c_in {
                let din = &mut dinput[i * hw..(i + 1) * hw];
                let wbase = (o * w_cin_total + w_cin_offset + i) * kk;
                for ky in 0..k {
                    let dy = ky as isize - p;
                    let (y0, y1) = span(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - p;
                        let (x0, x1) = span(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = weights[wbase + ky * k + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let drow = &mut din[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            for (d, &g) in drow.iter_mut().zip(&d_o[y * w + x0..y * w + x1]) {
                                *d += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Four-lane dot product with a fixed summation order.
    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let mut lanes = [0.0f64; 4];
        let ca = a.chunks_exact(4);
        let cb = b.chunks_exact(4);
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            for l in 0..4 {
                lanes[l] += x[l] * y[l];
            }
        }
        let mut tail = 0.0;
        for (x, y) in ra.iter().zip(rb) {
            tail += x * y;
        }
        (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
    }
}
