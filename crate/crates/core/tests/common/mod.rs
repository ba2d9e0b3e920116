//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use lbhic::raster::Image;
use lbhic::tensor::{mask_a_keeps, Kernel, NonLocalWeights, Tensor};
use lbhic::weights::Pcg32;

pub fn rand_tensor(rng: &mut Pcg32, c: usize, h: usize, w: usize, amp: f32) -> Tensor {
    Tensor::from_fn(c, h, w, |_, _, _| rng.uniform(-amp, amp))
}

pub fn rand_kernel(rng: &mut Pcg32, o: usize, i: usize, k: usize, amp: f32) -> Kernel {
    Kernel::from_fn(o, i, k, k, |_, _, _, _| rng.uniform(-amp, amp))
}

pub fn rand_vec(rng: &mut Pcg32, n: usize, amp: f32) -> Vec<f32> {
    (0..n).map(|_| rng.uniform(-amp, amp)).collect()
}

pub fn below(rng: &mut Pcg32, n: usize) -> usize {
    (rng.next_u32() as usize) % n
}

pub fn noise_image(rng: &mut Pcg32, w: usize, h: usize) -> Image {
    Image::from_fn(w, h, |_, _, _| (rng.next_u32() >> 24) as u8)
}

/// Smooth colour ramps with mild noise and a few hard edges.
pub fn structured_image(rng: &mut Pcg32, w: usize, h: usize) -> Image {
    let fx = rng.uniform(0.005, 0.05);
    let fy = rng.uniform(0.005, 0.05);
    let phase = rng.uniform(0.0, std::f32::consts::TAU);
    let edge = below(rng, w.max(1));
    Image::from_fn(w, h, |c, y, x| {
        let base = 127.5 + 100.0 * ((x as f32 * fx + y as f32 * fy + phase + c as f32).sin());
        let step = if x > edge { 40.0 } else { -40.0 };
        let n = (rng.next_u32() >> 28) as f32 - 8.0;
        (base + step + n).clamp(0.0, 255.0) as u8
    })
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

/// Direct-definition strided convolution in f64.
pub fn conv_ref(x: &Tensor, k: &Kernel, bias: &[f32], stride: usize, pad: usize) -> (usize, usize, Vec<f64>) {
    let (c_in, h, w) = x.dims();
    let (oc_n, _, kh, kw) = k.dims();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; oc_n * oh * ow];
    for oc in 0..oc_n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[oc] as f64;
                for ic in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc +=
                                    k.get(oc, ic, ky, kx) as f64 * x.get(ic, iy as usize, ix as usize) as f64;
                            }
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (oh, ow, out)
}

/// Direct-definition convolution accumulated in f32: bias first, then input
/// channels, then kernel rows and columns, padding taps skipped.
pub fn conv_ref32(
    x: &Tensor,
    k: &Kernel,
    bias: &[f32],
    stride: usize,
    pad: usize,
    keep: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let (c_in, h, w) = x.dims();
    let (oc_n, _, kh, kw) = k.dims();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(oc_n * oh * ow);
    for oc in 0..oc_n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if keep(ky, kx) && iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += k.get(oc, ic, ky, kx) * x.get(ic, iy as usize, ix as usize);
                            }
                        }
                    }
                }
                out.push(acc as f64);
            }
        }
    }
    out
}

/// Transposed convolution written as a gather over the taps that land on each
/// output, accumulated in f32 in the same order as [`conv_ref32`].
pub fn tconv_ref32(
    x: &Tensor,
    k: &Kernel,
    bias: &[f32],
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Vec<f64> {
    let (c_in, h, w) = x.dims();
    let (oc_n, _, kh, kw) = k.dims();
    let oh = (h - 1) * stride + kh + output_padding - 2 * pad;
    let ow = (w - 1) * stride + kw + output_padding - 2 * pad;
    let source = |o: usize, t: usize, len: usize| {
        let v = (o + pad).checked_sub(t)?;
        (v % stride == 0 && v / stride < len).then_some(v / stride)
    };
    let mut out = Vec::with_capacity(oc_n * oh * ow);
    for oc in 0..oc_n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            if let (Some(iy), Some(ix)) = (source(oy, ky, h), source(ox, kx, w)) {
                                acc += k.get(oc, ic, ky, kx) * x.get(ic, iy, ix);
                            }
                        }
                    }
                }
                out.push(acc as f64);
            }
        }
    }
    out
}

/// Transposed convolution as a scatter of every input sample, in f64.
/// The kernel is laid out `(out, in, k, k)` like the forward convolution.
pub fn tconv_ref(
    x: &Tensor,
    k: &Kernel,
    bias: &[f32],
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> (usize, usize, Vec<f64>) {
    let (c_in, h, w) = x.dims();
    let (oc_n, _, kh, kw) = k.dims();
    let oh = (h - 1) * stride + kh + output_padding - 2 * pad;
    let ow = (w - 1) * stride + kw + output_padding - 2 * pad;
    let mut out = vec![0.0; oc_n * oh * ow];
    for oc in 0..oc_n {
        for v in &mut out[oc * oh * ow..(oc + 1) * oh * ow] {
            *v = bias[oc] as f64;
        }
        for ic in 0..c_in {
            for iy in 0..h {
                for ix in 0..w {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                out[(oc * oh + oy as usize) * ow + ox as usize] +=
                                    k.get(oc, ic, ky, kx) as f64 * x.get(ic, iy, ix) as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    (oh, ow, out)
}

/// Mask-A convolution: a "same" convolution whose kernel has every tap at or
/// after the centre (raster order) zeroed.
pub fn masked_conv_ref(x: &Tensor, k: &Kernel, bias: &[f32]) -> Vec<f64> {
    let (oc_n, ic_n, ks, _) = k.dims();
    let masked = Kernel::from_fn(oc_n, ic_n, ks, ks, |o, i, y, xx| {
        if y * ks + xx < (ks / 2) * ks + ks / 2 {
            k.get(o, i, y, xx)
        } else {
            0.0
        }
    });
    // Independent of the library's own mask predicate.
    for y in 0..ks {
        for xx in 0..ks {
            assert_eq!(
                mask_a_keeps(ks, y, xx),
                y < ks / 2 || (y == ks / 2 && xx < ks / 2)
            );
        }
    }
    conv_ref(x, &masked, bias, 1, ks / 2).2
}

fn pointwise_ref(x: &[Vec<f64>], k: &Kernel, bias: &[f32]) -> Vec<Vec<f64>> {
    let (o, i, _, _) = k.dims();
    (0..o)
        .map(|oc| {
            (0..x[0].len())
                .map(|p| {
                    bias[oc] as f64
                        + (0..i)
                            .map(|ic| k.get(oc, ic, 0, 0) as f64 * x[ic][p])
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Embedded-Gaussian non-local block in f64.
pub fn nonlocal_ref(x: &Tensor, w: &NonLocalWeights) -> Vec<f64> {
    let (c, h, wd) = x.dims();
    let n = h * wd;
    let xs: Vec<Vec<f64>> = (0..c)
        .map(|ch| x.plane(ch).iter().map(|&v| v as f64).collect())
        .collect();
    let theta = pointwise_ref(&xs, &w.theta.0, &w.theta.1);
    let phi = pointwise_ref(&xs, &w.phi.0, &w.phi.1);
    let g = pointwise_ref(&xs, &w.g.0, &w.g.1);
    let inner = theta.len();
    let mut y = vec![vec![0.0; n]; inner];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| (0..inner).map(|d| theta[d][i] * phi[d][j]).sum())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for d in 0..inner {
            y[d][i] = (0..n).map(|j| e[j] / z * g[d][j]).sum();
        }
    }
    let proj = pointwise_ref(&y, &w.out.0, &w.out.1);
    let mut out = Vec::with_capacity(c * n);
    for ch in 0..c {
        for p in 0..n {
            out.push(proj[ch][p] + xs[ch][p]);
        }
    }
    out
}

pub fn psnr_ref(a: &Image, b: &Image) -> f64 {
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        99.0
    } else {
        (20.0 * 255.0f64.log10() - 10.0 * mse.log10()).min(99.0)
    }
}

/// MS-SSIM with a full 2-D Gaussian window applied directly.
pub fn ms_ssim_ref(a: &Image, b: &Image) -> f64 {
    const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let g1: Vec<f64> = (0..11)
        .map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp())
        .collect();
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (y, row) in win.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            *v = g1[y] * g1[x];
            total += *v;
        }
    }
    let win: Vec<Vec<f64>> = win
        .iter()
        .map(|r| r.iter().map(|v| v / total).collect())
        .collect();

    let mut score_sum = 0.0;
    for ch in 0..3 {
        let mut h = a.height();
        let mut w = a.width();
        let mut pa: Vec<f64> = (0..h * w).map(|i| a.pixel(ch, i / w, i % w) as f64).collect();
        let mut pb: Vec<f64> = (0..h * w).map(|i| b.pixel(ch, i / w, i % w) as f64).collect();
        let mut score = 1.0;
        for (s, wt) in WEIGHTS.iter().enumerate() {
            let (mut ssim, mut cs, mut count) = (0.0, 0.0, 0.0);
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for (dy, row) in win.iter().enumerate() {
                        for (dx, &g) in row.iter().enumerate() {
                            let i = (y + dy) * w + x + dx;
                            ma += g * pa[i];
                            mb += g * pb[i];
                            saa += g * pa[i] * pa[i];
                            sbb += g * pb[i] * pb[i];
                            sab += g * pa[i] * pb[i];
                        }
                    }
                    let va = saa - ma * ma;
                    let vb = sbb - mb * mb;
                    let cov = sab - ma * mb;
                    let csv = (2.0 * cov + c2) / (va + vb + c2);
                    cs += csv;
                    ssim += csv * (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
                    count += 1.0;
                }
            }
            let term = if s == 4 { ssim / count } else { cs / count };
            score *= term.max(0.0).powf(*wt);
            if s < 4 {
                let (nh, nw) = (h / 2, w / 2);
                let pool = |p: &[f64]| -> Vec<f64> {
                    (0..nh * nw)
                        .map(|i| {
                            let (y, x) = (2 * (i / nw), 2 * (i % nw));
                            (p[y * w + x] + p[y * w + x + 1] + p[(y + 1) * w + x] + p[(y + 1) * w + x + 1])
                                / 4.0
                        })
                        .collect()
                };
                pa = pool(&pa);
                pb = pool(&pb);
                h = nh;
                w = nw;
            }
        }
        score_sum += score;
    }
    score_sum / 3.0
}

/// Sylvester Hadamard matrix of order `n`.
pub fn hadamard(n: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![1.0]];
    while m.len() < n {
        let k = m.len();
        let mut next = vec![vec![0.0; 2 * k]; 2 * k];
        for i in 0..k {
            for j in 0..k {
                next[i][j] = m[i][j];
                next[i][j + k] = m[i][j];
                next[i + k][j] = m[i][j];
                next[i + k][j + k] = -m[i][j];
            }
        }
        m = next;
    }
    m
}

/// `sum |H T H^T|` over zero-padded tiles, by explicit matrix products.
pub fn satd_ref(x: &Tensor, block: usize) -> f64 {
    let hm = hadamard(block);
    let (c, h, w) = x.dims();
    let mut total = 0.0;
    for ch in 0..c {
        for ty in (0..h).step_by(block) {
            for tx in (0..w).step_by(block) {
                let t: Vec<Vec<f64>> = (0..block)
                    .map(|y| {
                        (0..block)
                            .map(|xx| {
                                let (sy, sx) = (ty + y, tx + xx);
                                if sy < h && sx < w {
                                    x.get(ch, sy, sx) as f64
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    })
                    .collect();
                for i in 0..block {
                    for j in 0..block {
                        let mut v = 0.0;
                        for a in 0..block {
                            for b in 0..block {
                                v += hm[i][a] * t[a][b] * hm[j][b];
                            }
                        }
                        total += v.abs();
                    }
                }
            }
        }
    }
    total
}

/// Composite Simpson rule.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}
