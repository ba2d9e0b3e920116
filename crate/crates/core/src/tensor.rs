//! Deterministic single-precision tensor math in channel-major (CHW) layout.
//!
//! Every convolution accumulates each output element in the same order:
//! start from the bias, then add taps ordered by input channel, kernel row,
//! kernel column, skipping taps that fall into the zero padding. Loop nests
//! may differ between the whole-tensor routines and the single-position
//! routines used by the autoregressive decoder, but the per-element order
//! never does, so both produce bit-identical values.

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same_dims(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "{op}: dims {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_dims(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor::new(self.channels, self.height, self.width, data)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_dims(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor::new(self.channels, self.height, self.width, data)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_dims(other, "mul")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Tensor::new(self.channels, self.height, self.width, data)
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Concatenates tensors along the channel axis.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let (h, w) = (first.height, first.width);
        let mut channels = 0;
        let mut data = Vec::new();
        for part in parts {
            if part.height != h || part.width != w {
                return Err(Error::shape(format!(
                    "concat: spatial dims {}x{} vs {h}x{w}",
                    part.height, part.width
                )));
            }
            channels += part.channels;
            data.extend_from_slice(&part.data);
        }
        Tensor::new(channels, h, w, data)
    }

    /// Top-left `height x width` window of every channel.
    pub fn crop(&self, height: usize, width: usize) -> Result<Tensor> {
        if height > self.height || width > self.width {
            return Err(Error::shape(format!(
                "crop {height}x{width} exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Tensor::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, y, x)
        }))
    }

    /// Spatial transpose of every channel.
    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.channels, self.width, self.height, |c, y, x| {
            self.get(c, x, y)
        })
    }
}

/// Convolution kernel laid out as `(out_channels, in_channels, kh, kw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    data: Vec<f32>,
}

impl Kernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != out_channels * in_channels * kh * kw {
            return Err(Error::shape(format!(
                "kernel data length {} does not match {out_channels}x{in_channels}x{kh}x{kw}",
                data.len()
            )));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::shape("kernel with zero spatial extent"));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kh,
            kw,
            data,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kh,
            kw,
            data: vec![0.0; out_channels * in_channels * kh * kw],
        }
    }

    pub fn from_fn(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(out_channels * in_channels * kh * kw);
        for o in 0..out_channels {
            for i in 0..in_channels {
                for y in 0..kh {
                    for x in 0..kw {
                        data.push(f(o, i, y, x));
                    }
                }
            }
        }
        Self {
            out_channels,
            in_channels,
            kh,
            kw,
            data,
        }
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.out_channels, self.in_channels, self.kh, self.kw)
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, y: usize, x: usize) -> f32 {
        self.data[((o * self.in_channels + i) * self.kh + y) * self.kw + x]
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Weights of one `(out, in)` pair, `kh * kw` values in row-major order.
    #[inline]
    fn taps(&self, o: usize, i: usize) -> &[f32] {
        let n = self.kh * self.kw;
        let start = (o * self.in_channels + i) * n;
        &self.data[start..start + n]
    }
}

fn check_bias(bias: &[f32], out_channels: usize) -> Result<()> {
    if bias.len() != out_channels {
        return Err(Error::shape(format!(
            "bias length {} does not match {out_channels} filters",
            bias.len()
        )));
    }
    Ok(())
}

fn check_in_channels(input: &Tensor, kernel: &Kernel) -> Result<()> {
    if kernel.in_channels != input.channels {
        return Err(Error::shape(format!(
            "kernel expects {} input channels, got {}",
            kernel.in_channels, input.channels
        )));
    }
    Ok(())
}

/// Output extent of a strided convolution along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output channels per register tile.
const MR: usize = 4;
/// Output positions per register tile.
const NR: usize = 8;
/// Output positions per packed panel.
const PANEL: usize = 16 * NR;

/// Shared engine behind [`conv2d`] and [`tconv2d`]: a lowered
/// (im2col-style) matrix product over the output `positions` of every
/// plane, reading input tap `(ky, kx)` for output `pos` at the flat index
/// returned by `gather` (`None` reads zero).
///
/// Every output element is `bias`, then one product per reduction index in
/// ascending `(ic, tap)` order. The order never depends on tiling, so results
/// are reproducible bit for bit.
fn lowered_conv<G>(
    input: &Tensor,
    kernel: &Kernel,
    bias: &[f32],
    taps: &[(usize, usize)],
    positions: &[usize],
    gather: G,
    out: &mut Tensor,
) where
    G: Fn(usize, usize, usize) -> Option<usize>,
{
    let c_in = input.channels;
    let n_taps = taps.len();
    let r_len = c_in * n_taps;
    if positions.is_empty() {
        return;
    }
    let oc_total = kernel.out_channels;
    let groups = oc_total.div_ceil(MR);
    let plane = out.height * out.width;

    // Weights packed as [group][r][MR], zero rows past the last filter.
    let mut wpack = vec![0.0f32; groups * r_len * MR];
    for oc in 0..oc_total {
        let (g, lane) = (oc / MR, oc % MR);
        for ic in 0..c_in {
            let t_w = kernel.taps(oc, ic);
            for (t, &(ky, kx)) in taps.iter().enumerate() {
                let r = ic * n_taps + t;
                wpack[(g * r_len + r) * MR + lane] = t_w[ky * kernel.kw + kx];
            }
        }
    }

    let mut index = vec![usize::MAX; n_taps * PANEL];
    let mut cpack = vec![0.0f32; r_len * PANEL];
    for panel in positions.chunks(PANEL) {
        let chunks = panel.len().div_ceil(NR);
        index.fill(usize::MAX);
        for (t, &(ky, kx)) in taps.iter().enumerate() {
            for (j, &pos) in panel.iter().enumerate() {
                if let Some(i) = gather(pos, ky, kx) {
                    index[t * PANEL + j] = i;
                }
            }
        }
        // Columns packed as [chunk][r][NR].
        for ic in 0..c_in {
            let src = input.plane(ic);
            for t in 0..n_taps {
                let r = ic * n_taps + t;
                for ch in 0..chunks {
                    let dst = &mut cpack[(ch * r_len + r) * NR..(ch * r_len + r + 1) * NR];
                    for (l, d) in dst.iter_mut().enumerate() {
                        let j = ch * NR + l;
                        let i = if j < panel.len() {
                            index[t * PANEL + j]
                        } else {
                            usize::MAX
                        };
                        *d = if i == usize::MAX { 0.0 } else { src[i] };
                    }
                }
            }
        }
        for g in 0..groups {
            let wp = &wpack[g * r_len * MR..(g + 1) * r_len * MR];
            let mut init = [0.0f32; MR];
            for (lane, v) in init.iter_mut().enumerate() {
                if let Some(&b) = bias.get(g * MR + lane) {
                    *v = b;
                }
            }
            for ch in 0..chunks {
                let cp = &cpack[ch * r_len * NR..(ch + 1) * r_len * NR];
                let acc = micro_kernel(wp, cp, init);
                for (lane, row) in acc.iter().enumerate() {
                    let oc = g * MR + lane;
                    if oc >= oc_total {
                        break;
                    }
                    let dst = &mut out.data[oc * plane..(oc + 1) * plane];
                    for (l, &v) in row.iter().enumerate() {
                        if let Some(&pos) = panel.get(ch * NR + l) {
                            dst[pos] = v;
                        }
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn micro_kernel(wp: &[f32], cp: &[f32], init: [f32; MR]) -> [[f32; NR]; MR] {
    let mut acc = [[0.0f32; NR]; MR];
    for (row, &b) in acc.iter_mut().zip(&init) {
        *row = [b; NR];
    }
    for (w, c) in wp.chunks_exact(MR).zip(cp.chunks_exact(NR)) {
        for i in 0..MR {
            for j in 0..NR {
                acc[i][j] += w[i] * c[j];
            }
        }
    }
    acc
}

/// Zero-padded direct 2-D convolution (cross-correlation). Each output is
/// accumulated as bias, then input channels ascending, then kernel rows and
/// columns ascending.
pub fn conv2d(input: &Tensor, kernel: &Kernel, bias: &[f32], stride: usize, pad: usize) -> Result<Tensor> {
    check_in_channels(input, kernel)?;
    check_bias(bias, kernel.out_channels)?;
    if stride == 0 {
        return Err(Error::shape("conv2d stride must be at least 1"));
    }
    let (_, h, w) = input.dims();
    let (kh, kw) = (kernel.kh, kernel.kw);
    let oh = conv_out_len(h, kh, stride, pad)
        .ok_or_else(|| Error::shape(format!("conv2d: kernel {kh} too large for height {h}")))?;
    let ow = conv_out_len(w, kw, stride, pad)
        .ok_or_else(|| Error::shape(format!("conv2d: kernel {kw} too large for width {w}")))?;

    let taps: Vec<(usize, usize)> = (0..kh).flat_map(|ky| (0..kw).map(move |kx| (ky, kx))).collect();
    let positions: Vec<usize> = (0..oh * ow).collect();
    let mut out = Tensor::zeros(kernel.out_channels, oh, ow);
    lowered_conv(
        input,
        kernel,
        bias,
        &taps,
        &positions,
        |pos, ky, kx| {
            let iy = ((pos / ow) * stride + ky).checked_sub(pad)?;
            let ix = ((pos % ow) * stride + kx).checked_sub(pad)?;
            (iy < h && ix < w).then_some(iy * w + ix)
        },
        &mut out,
    );
    Ok(out)
}

/// Transposed (fractionally strided) convolution, the adjoint of [`conv2d`].
///
/// The kernel uses the same `(out, in, kh, kw)` layout as `conv2d`. Each input
/// element `(ic, iy, ix)` scatters into output `(iy*s - p + ky, ix*s - p + kx)`.
/// Output extent is `(H-1)*s - 2p + k + output_padding`; the extra rows and
/// columns of `output_padding` sit at the bottom/right edge.
///
/// Evaluated as a gather: outputs are grouped by `(oy + p) mod s` and
/// `(ox + p) mod s`, and each group only visits the kernel taps that can reach
/// it. Accumulation order per output is the same as in [`conv2d`].
pub fn tconv2d(
    input: &Tensor,
    kernel: &Kernel,
    bias: &[f32],
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<Tensor> {
    check_in_channels(input, kernel)?;
    check_bias(bias, kernel.out_channels)?;
    if stride == 0 {
        return Err(Error::shape("tconv2d stride must be at least 1"));
    }
    if output_padding >= stride {
        return Err(Error::shape("tconv2d output padding must be below the stride"));
    }
    let (_, h, w) = input.dims();
    let (kh, kw) = (kernel.kh, kernel.kw);
    let full_h = (h.max(1) - 1) * stride + kh + output_padding;
    let full_w = (w.max(1) - 1) * stride + kw + output_padding;
    if h == 0 || w == 0 || full_h <= 2 * pad || full_w <= 2 * pad {
        return Err(Error::shape(format!(
            "tconv2d: empty output for {h}x{w} input, k={kh}, s={stride}, p={pad}"
        )));
    }
    let oh = full_h - 2 * pad;
    let ow = full_w - 2 * pad;

    let mut out = Tensor::zeros(kernel.out_channels, oh, ow);
    for py in 0..stride {
        for px in 0..stride {
            let positions: Vec<usize> = (0..oh)
                .filter(|oy| (oy + pad) % stride == py)
                .flat_map(|oy| {
                    (0..ow)
                        .filter(move |ox| (ox + pad) % stride == px)
                        .map(move |ox| oy * ow + ox)
                })
                .collect();
            let taps: Vec<(usize, usize)> = (0..kh)
                .filter(|ky| ky % stride == py)
                .flat_map(|ky| (0..kw).filter(|kx| kx % stride == px).map(move |kx| (ky, kx)))
                .collect();
            if positions.is_empty() {
                continue;
            }
            if taps.is_empty() {
                for oc in 0..kernel.out_channels {
                    let plane = out.plane_mut(oc);
                    for &p in &positions {
                        plane[p] = bias[oc];
                    }
                }
                continue;
            }
            lowered_conv(
                input,
                kernel,
                bias,
                &taps,
                &positions,
                |pos, ky, kx| {
                    let iy = ((pos / ow) + pad).checked_sub(ky)? / stride;
                    let ix = ((pos % ow) + pad).checked_sub(kx)? / stride;
                    (iy < h && ix < w).then_some(iy * w + ix)
                },
                &mut out,
            );
        }
    }
    Ok(out)
}

/// Mask type for [`masked_conv2d`]. Only type A (center excluded) is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskType {
    A,
}

/// Returns whether tap `(ky, kx)` survives a type-A mask of a `k x k` kernel.
#[inline]
pub fn mask_a_keeps(k: usize, ky: usize, kx: usize) -> bool {
    ky * k + kx < (k / 2) * k + k / 2
}

fn check_masked(kernel: &Kernel) -> Result<usize> {
    if kernel.kh != kernel.kw {
        return Err(Error::config("masked convolution needs a square kernel"));
    }
    if kernel.kh.is_multiple_of(2) {
        return Err(Error::config(format!(
            "masked convolution needs an odd kernel size, got {}",
            kernel.kh
        )));
    }
    Ok(kernel.kh)
}

/// Kernel taps kept by mask A, in raster order.
fn mask_a_taps(k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .flat_map(|ky| (0..k).map(move |kx| (ky, kx)))
        .filter(|&(ky, kx)| mask_a_keeps(k, ky, kx))
        .collect()
}

/// Causal stride-1 "same" convolution: the output at `(h, w)` only reads input
/// positions strictly before `(h, w)` in raster order. Masked taps are never
/// read, so the values stored at later positions are irrelevant.
pub fn masked_conv2d(input: &Tensor, kernel: &Kernel, bias: &[f32], mask: MaskType) -> Result<Tensor> {
    let MaskType::A = mask;
    let k = check_masked(kernel)?;
    check_in_channels(input, kernel)?;
    check_bias(bias, kernel.out_channels)?;
    let (_, h, w) = input.dims();
    let pad = k / 2;
    let taps = mask_a_taps(k);
    let positions: Vec<usize> = (0..h * w).collect();
    let mut out = Tensor::zeros(kernel.out_channels, h, w);
    lowered_conv(
        input,
        kernel,
        bias,
        &taps,
        &positions,
        |pos, ky, kx| {
            let iy = (pos / w + ky).checked_sub(pad)?;
            let ix = (pos % w + kx).checked_sub(pad)?;
            (iy < h && ix < w).then_some(iy * w + ix)
        },
        &mut out,
    );
    Ok(out)
}

/// Single-position evaluation of [`masked_conv2d`]; writes one value per
/// filter into `out`. Bit-identical to the whole-tensor routine.
pub fn masked_conv2d_at(
    input: &Tensor,
    kernel: &Kernel,
    bias: &[f32],
    y: usize,
    x: usize,
    out: &mut [f32],
) -> Result<()> {
    MaskedConvAt::new(kernel)?.apply(input, bias, y, x, out)
}

/// A mask-A kernel rearranged as `[ic][tap][oc]` so that one position can be
/// evaluated with all filters updated together. Same accumulation order as
/// [`masked_conv2d`]: bias, then input channels, then taps in raster order.
#[derive(Clone, Debug)]
pub struct MaskedConvAt {
    k: usize,
    in_channels: usize,
    out_channels: usize,
    taps: Vec<(usize, usize)>,
    data: Vec<f32>,
}

impl MaskedConvAt {
    pub fn new(kernel: &Kernel) -> Result<Self> {
        let k = check_masked(kernel)?;
        let taps = mask_a_taps(k);
        let (oc_n, ic_n) = (kernel.out_channels, kernel.in_channels);
        let mut data = vec![0.0f32; ic_n * taps.len() * oc_n];
        for oc in 0..oc_n {
            for ic in 0..ic_n {
                let t_w = kernel.taps(oc, ic);
                for (t, &(ky, kx)) in taps.iter().enumerate() {
                    data[(ic * taps.len() + t) * oc_n + oc] = t_w[ky * k + kx];
                }
            }
        }
        Ok(Self {
            k,
            in_channels: ic_n,
            out_channels: oc_n,
            taps,
            data,
        })
    }

    pub fn apply(&self, input: &Tensor, bias: &[f32], y: usize, x: usize, out: &mut [f32]) -> Result<()> {
        let (c_in, h, w) = input.dims();
        if c_in != self.in_channels {
            return Err(Error::shape(format!(
                "kernel expects {} input channels, got {c_in}",
                self.in_channels
            )));
        }
        check_bias(bias, self.out_channels)?;
        if out.len() != self.out_channels {
            return Err(Error::shape("masked_conv2d_at: output slice length"));
        }
        if y >= h || x >= w {
            return Err(Error::shape("masked_conv2d_at: position out of range"));
        }
        let pad = self.k / 2;
        let mut idx = Vec::with_capacity(self.taps.len());
        for (t, &(ky, kx)) in self.taps.iter().enumerate() {
            let (Some(iy), Some(ix)) = ((y + ky).checked_sub(pad), (x + kx).checked_sub(pad)) else {
                continue;
            };
            if iy < h && ix < w {
                idx.push((t, iy * w + ix));
            }
        }
        out.copy_from_slice(bias);
        let n_oc = self.out_channels;
        let n_t = self.taps.len();
        for ic in 0..c_in {
            let plane = input.plane(ic);
            for &(t, i) in &idx {
                let v = plane[i];
                let row = &self.data[(ic * n_t + t) * n_oc..(ic * n_t + t + 1) * n_oc];
                for (o, &wt) in out.iter_mut().zip(row) {
                    *o += wt * v;
                }
            }
        }
        Ok(())
    }
}

/// 1x1 convolution of a single feature vector, same accumulation order as
/// [`conv2d`] with a 1x1 kernel.
pub fn pointwise_at(features: &[f32], kernel: &Kernel, bias: &[f32], out: &mut [f32]) -> Result<()> {
    Pointwise::new(kernel)?.apply(features, bias, out)
}

/// A 1x1 kernel stored input-major for [`pointwise_at`]-style evaluation with
/// all filters updated together.
#[derive(Clone, Debug)]
pub struct Pointwise {
    in_channels: usize,
    out_channels: usize,
    data: Vec<f32>,
}

impl Pointwise {
    pub fn new(kernel: &Kernel) -> Result<Self> {
        if kernel.kh != 1 || kernel.kw != 1 {
            return Err(Error::shape("pointwise evaluation needs a 1x1 kernel"));
        }
        let (oc_n, ic_n) = (kernel.out_channels, kernel.in_channels);
        let mut data = vec![0.0f32; oc_n * ic_n];
        for oc in 0..oc_n {
            for ic in 0..ic_n {
                data[ic * oc_n + oc] = kernel.data[oc * ic_n + ic];
            }
        }
        Ok(Self {
            in_channels: ic_n,
            out_channels: oc_n,
            data,
        })
    }

    pub fn apply(&self, features: &[f32], bias: &[f32], out: &mut [f32]) -> Result<()> {
        if features.len() != self.in_channels || out.len() != self.out_channels {
            return Err(Error::shape("pointwise_at: vector length mismatch"));
        }
        check_bias(bias, self.out_channels)?;
        out.copy_from_slice(bias);
        for (row, &v) in self.data.chunks_exact(self.out_channels).zip(features) {
            for (o, &wt) in out.iter_mut().zip(row) {
                *o += wt * v;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Sigmoid,
    None,
}

impl Activation {
    #[inline]
    pub fn apply_scalar(self, v: f32) -> f32 {
        match self {
            Activation::LeakyRelu => {
                if v >= 0.0 {
                    v
                } else {
                    v * LEAKY_SLOPE
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::None => v,
        }
    }

    pub fn apply_in_place(self, values: &mut [f32]) {
        if self == Activation::None {
            return;
        }
        for v in values {
            *v = self.apply_scalar(*v);
        }
    }
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    let mut out = input.clone();
    kind.apply_in_place(out.data_mut());
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StripDirection {
    /// Average each column: `(C, H, W) -> (C, 1, W)`.
    Vertical,
    /// Average each row: `(C, H, W) -> (C, H, 1)`.
    Horizontal,
}

pub fn strip_pool(input: &Tensor, direction: StripDirection) -> Result<Tensor> {
    let (c, h, w) = input.dims();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::shape("strip_pool of an empty tensor"));
    }
    match direction {
        StripDirection::Vertical => {
            let mut out = Tensor::zeros(c, 1, w);
            for ch in 0..c {
                let plane = input.plane(ch);
                let sums = out.plane_mut(ch);
                for row in plane.chunks_exact(w) {
                    for (s, v) in sums.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                for s in sums.iter_mut() {
                    *s /= h as f32;
                }
            }
            Ok(out)
        }
        StripDirection::Horizontal => {
            let mut out = Tensor::zeros(c, h, 1);
            for ch in 0..c {
                let plane = input.plane(ch);
                for y in 0..h {
                    let mut acc = 0.0f32;
                    for v in &plane[y * w..(y + 1) * w] {
                        acc += v;
                    }
                    out.set(ch, y, 0, acc / w as f32);
                }
            }
            Ok(out)
        }
    }
}

/// Replicates a singleton spatial axis up to `target_h x target_w`.
pub fn broadcast_expand(input: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims();
    if h != target_h && h != 1 {
        return Err(Error::shape(format!(
            "cannot expand non-singleton height {h} to {target_h}"
        )));
    }
    if w != target_w && w != 1 {
        return Err(Error::shape(format!(
            "cannot expand non-singleton width {w} to {target_w}"
        )));
    }
    Ok(Tensor::from_fn(c, target_h, target_w, |ch, y, x| {
        input.get(ch, if h == 1 { 0 } else { y }, if w == 1 { 0 } else { x })
    }))
}

/// Nearest-neighbour upsampling by an integer factor, cropped to the target.
pub fn upsample_nearest(input: &Tensor, factor: usize, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims();
    if factor == 0 || h * factor < target_h || w * factor < target_w {
        return Err(Error::shape(format!(
            "upsample x{factor} of {h}x{w} cannot cover {target_h}x{target_w}"
        )));
    }
    Ok(Tensor::from_fn(c, target_h, target_w, |ch, y, x| {
        input.get(ch, y / factor, x / factor)
    }))
}

/// Parameters of an embedded-Gaussian non-local block. All four kernels are
/// 1x1; `theta`, `phi` and `g` project `C -> C/2`, `out` projects back.
#[derive(Clone, Debug)]
pub struct NonLocalWeights {
    pub theta: (Kernel, Vec<f32>),
    pub phi: (Kernel, Vec<f32>),
    pub g: (Kernel, Vec<f32>),
    pub out: (Kernel, Vec<f32>),
}

/// `x + W_z * softmax_j(theta_i . phi_j) g_j`, softmax over all positions.
pub fn nonlocal_block(input: &Tensor, weights: &NonLocalWeights) -> Result<Tensor> {
    let (c, h, w) = input.dims();
    if c < 2 {
        return Err(Error::config(format!(
            "non-local block needs at least 2 channels, got {c}"
        )));
    }
    let inner = c / 2;
    for (name, (k, _)) in [
        ("theta", &weights.theta),
        ("phi", &weights.phi),
        ("g", &weights.g),
    ] {
        if k.dims() != (inner, c, 1, 1) {
            return Err(Error::shape(format!(
                "non-local {name} kernel {:?}, expected {:?}",
                k.dims(),
                (inner, c, 1, 1)
            )));
        }
    }
    if weights.out.0.dims() != (c, inner, 1, 1) {
        return Err(Error::shape("non-local output kernel dims"));
    }
    let theta = conv2d(input, &weights.theta.0, &weights.theta.1, 1, 0)?;
    let phi = conv2d(input, &weights.phi.0, &weights.phi.1, 1, 0)?;
    let g = conv2d(input, &weights.g.0, &weights.g.1, 1, 0)?;

    let n = h * w;
    // Position-major copies so each dot product reads contiguous memory.
    let theta_t = position_major(&theta);
    let phi_t = position_major(&phi);
    let g_t = position_major(&g);

    let mut attended = Tensor::zeros(inner, h, w);
    let mut logits = vec![0.0f32; n];
    let mut acc = vec![0.0f32; inner];
    for i in 0..n {
        let q = &theta_t[i * inner..(i + 1) * inner];
        let mut max = f32::NEG_INFINITY;
        for (j, l) in logits.iter_mut().enumerate() {
            let kv = &phi_t[j * inner..(j + 1) * inner];
            let mut dot = 0.0f32;
            for (a, b) in q.iter().zip(kv) {
                dot += a * b;
            }
            *l = dot;
            max = max.max(dot);
        }
        let mut denom = 0.0f32;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            denom += *l;
        }
        acc.fill(0.0);
        for (j, &l) in logits.iter().enumerate() {
            let weight = l / denom;
            let gv = &g_t[j * inner..(j + 1) * inner];
            for (a, v) in acc.iter_mut().zip(gv) {
                *a += weight * v;
            }
        }
        for (ch, &a) in acc.iter().enumerate() {
            attended.data_mut()[ch * n + i] = a;
        }
    }
    let projected = conv2d(&attended, &weights.out.0, &weights.out.1, 1, 0)?;
    projected.add(input)
}

fn position_major(t: &Tensor) -> Vec<f32> {
    let (c, h, w) = t.dims();
    let n = h * w;
    let mut out = vec![0.0f32; c * n];
    for ch in 0..c {
        for (i, &v) in t.plane(ch).iter().enumerate() {
            out[i * c + ch] = v;
        }
    }
    out
}
