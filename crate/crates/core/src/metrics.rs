//! Quality, rate and analysis metrics: PSNR, MS-SSIM, SATD, bpp, BD-rate and
//! the neighbour-block correlation study.

use std::io;

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Metric(format!(
            "image dims differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// PSNR over all three channels of two 8-bit images, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(PSNR_CAP);
    }
    let mse = sse / a.data().len() as f64;
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Smallest side length that survives four halvings with a full window.
pub const MS_SSIM_MIN_DIM: usize = SSIM_WINDOW << 4;

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                v.push((self.v[i] + self.v[i + 1] + self.v[i + self.w] + self.v[i + self.w + 1]) / 4.0);
            }
        }
        Plane { h, w, v }
    }
}

/// Valid-mode separable filtering.
fn filter_valid(p: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_terms(a: &Plane, b: &Plane, taps: &[f64]) -> (f64, f64) {
    let (h, w) = (a.h, a.w);
    let prod =
        |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.v.iter().zip(&b.v).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(&a.v, h, w, taps);
    let mu_b = filter_valid(&b.v, h, w, taps);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, taps);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, taps);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, taps);
    let n = mu_a.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let c = (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2);
        let l = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
        cs += c;
        ssim += l * c;
    }
    (ssim / n, cs / n)
}

/// Five-scale MS-SSIM, computed per channel on 8-bit values and averaged.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h.min(w) < MS_SSIM_MIN_DIM {
        return Err(Error::Metric(format!(
            "MS-SSIM over 5 scales needs both sides >= {MS_SSIM_MIN_DIM}, got {w}x{h}; \
             use fewer scales for small images"
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for c in 0..3 {
        let plane = |img: &Image| Plane {
            h,
            w,
            v: (0..h * w).map(|i| img.pixel(c, i / w, i % w) as f64).collect(),
        };
        let (mut pa, mut pb) = (plane(a), plane(b));
        let mut score = 1.0;
        for (s, &weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (ssim, cs) = ssim_terms(&pa, &pb, &taps);
            let last = s + 1 == MS_SSIM_WEIGHTS.len();
            let term = if last { ssim } else { cs };
            score *= term.max(0.0).powf(weight);
            if !last {
                pa = pa.downsample();
                pb = pb.downsample();
            }
        }
        total += score;
    }
    Ok(total / 3.0)
}

/// In-place unnormalized Walsh-Hadamard transform (natural order).
fn fwht(v: &mut [f64]) {
    let n = v.len();
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(2 * h) {
            for j in i..i + h {
                let (x, y) = (v[j], v[j + h]);
                v[j] = x + y;
                v[j + h] = x - y;
            }
        }
        h *= 2;
    }
}

/// Sum of absolute Hadamard coefficients over `block x block` tiles of every
/// channel; partial edge tiles are zero-padded.
pub fn satd(signal: &Tensor, block: usize) -> Result<f64> {
    if block == 0 || !block.is_power_of_two() {
        return Err(Error::Metric(format!(
            "SATD tile size must be a power of two, got {block}"
        )));
    }
    let (c, h, w) = signal.dims();
    let mut tile = vec![0.0f64; block * block];
    let mut col = vec![0.0f64; block];
    let mut total = 0.0;
    for ch in 0..c {
        for ty in (0..h).step_by(block) {
            for tx in (0..w).step_by(block) {
                for y in 0..block {
                    for x in 0..block {
                        let (sy, sx) = (ty + y, tx + x);
                        tile[y * block + x] = if sy < h && sx < w {
                            signal.get(ch, sy, sx) as f64
                        } else {
                            0.0
                        };
                    }
                }
                for row in tile.chunks_exact_mut(block) {
                    fwht(row);
                }
                for x in 0..block {
                    for y in 0..block {
                        col[y] = tile[y * block + x];
                    }
                    fwht(&mut col);
                    total += col.iter().map(|v| v.abs()).sum::<f64>();
                }
            }
        }
    }
    Ok(total)
}

/// Bits per pixel of `bytes` bytes over an `height x width` image.
pub fn bpp(bytes: usize, height: usize, width: usize) -> f64 {
    8.0 * bytes as f64 / (height * width) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
}

impl RdPoint {
    pub fn new(bpp: f64, quality: f64) -> Self {
        Self { bpp, quality }
    }
}

/// Least-squares cubic `ln(rate) ~ p(q)` in a centred, scaled variable.
struct CubicFit {
    coef: [f64; 4],
    center: f64,
    scale: f64,
}

impl CubicFit {
    fn new(points: &[RdPoint], center: f64, scale: f64) -> Result<Self> {
        let mut ata = [[0.0f64; 4]; 4];
        let mut atb = [0.0f64; 4];
        for p in points {
            let t = (p.quality - center) / scale;
            let basis = [1.0, t, t * t, t * t * t];
            for i in 0..4 {
                for j in 0..4 {
                    ata[i][j] += basis[i] * basis[j];
                }
                atb[i] += basis[i] * p.bpp.ln();
            }
        }
        let coef = solve4(ata, atb).ok_or_else(|| {
            Error::Metric("rate-distortion points are degenerate (repeated qualities?)".into())
        })?;
        Ok(Self { coef, center, scale })
    }

    /// Integral of the fit over quality in `[lo, hi]`.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |q: f64| {
            let t = (q - self.center) / self.scale;
            let c = &self.coef;
            self.scale * (c[0] * t + c[1] * t * t / 2.0 + c[2] * t.powi(3) / 3.0 + c[3] * t.powi(4) / 4.0)
        };
        anti(hi) - anti(lo)
    }
}

/// Gaussian elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Average rate difference of `test` against `anchor` at equal quality, in
/// percent (negative means `test` needs fewer bits).
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    for (name, pts) in [("anchor", anchor), ("test", test)] {
        if pts.len() < 4 {
            return Err(Error::Metric(format!(
                "{name} curve needs at least 4 points, got {}",
                pts.len()
            )));
        }
        if pts.iter().any(|p| !(p.bpp > 0.0) || !p.quality.is_finite()) {
            return Err(Error::Metric(format!("{name} curve has a non-positive rate")));
        }
    }
    let range = |pts: &[RdPoint]| {
        pts.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.quality), hi.max(p.quality))
            })
    };
    let (a_lo, a_hi) = range(anchor);
    let (t_lo, t_hi) = range(test);
    let lo = a_lo.max(t_lo);
    let hi = a_hi.min(t_hi);
    if !(hi > lo) {
        return Err(Error::Metric(
            "quality ranges of the two curves do not overlap".into(),
        ));
    }
    let all_lo = a_lo.min(t_lo);
    let all_hi = a_hi.max(t_hi);
    let center = (all_lo + all_hi) / 2.0;
    let scale = ((all_hi - all_lo) / 2.0).max(f64::MIN_POSITIVE);
    let fa = CubicFit::new(anchor, center, scale)?;
    let ft = CubicFit::new(test, center, scale)?;
    let avg = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok((avg.exp() - 1.0) * 100.0)
}

/// One (target, reference) position pair of the correlation study.
/// Positions are relative to the current block's top-left pixel, so
/// reference rows (upper block) or columns (left block) are negative.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationRow {
    pub target_y: i64,
    pub target_x: i64,
    pub ref_y: i64,
    pub ref_x: i64,
    pub distance: f64,
    pub normalized_distance: f64,
    pub correlation: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrelationTable {
    pub rows: Vec<CorrelationRow>,
    /// Pairs dropped because one side never varies over the dataset.
    pub skipped: usize,
    /// Blocks (with both neighbours) contributing one sample to every pair.
    pub samples: usize,
}

pub const CORRELATION_CSV_HEADER: [&str; 7] = [
    "target_y",
    "target_x",
    "ref_y",
    "ref_x",
    "distance",
    "normalized_distance",
    "correlation",
];

impl CorrelationTable {
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CORRELATION_CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.target_y.to_string(),
                r.target_x.to_string(),
                r.ref_y.to_string(),
                r.ref_x.to_string(),
                format!("{:.6}", r.distance),
                format!("{:.6}", r.normalized_distance),
                format!("{:.6}", r.correlation),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Luma correlation between pixels of a block and pixels of its upper and
/// left neighbours, estimated across every block of the dataset that has
/// both neighbours. Positions are sampled every `stride` pixels. Distances
/// are mean-normalized per target: `(d - mean) / (max - min)`.
pub fn correlation_study(images: &[Image], block: usize, stride: usize) -> Result<CorrelationTable> {
    if images.len() < 2 {
        return Err(Error::Metric("correlation study needs at least 2 images".into()));
    }
    if block == 0 || stride == 0 || stride > block {
        return Err(Error::Metric(format!(
            "invalid block {block} / stride {stride} for the correlation study"
        )));
    }
    let b = block as i64;
    let grid: Vec<i64> = (0..b).step_by(stride).collect();
    let targets: Vec<(i64, i64)> = grid
        .iter()
        .flat_map(|&y| grid.iter().map(move |&x| (y, x)))
        .collect();
    let mut refs: Vec<(i64, i64)> = grid
        .iter()
        .flat_map(|&y| grid.iter().map(move |&x| (y - b, x)))
        .collect();
    refs.extend(grid.iter().flat_map(|&y| grid.iter().map(move |&x| (y, x - b))));

    let mut t_samples: Vec<Vec<f64>> = vec![Vec::new(); targets.len()];
    let mut r_samples: Vec<Vec<f64>> = vec![Vec::new(); refs.len()];
    let mut samples = 0;
    for img in images {
        let rows = img.height() / block;
        let cols = img.width() / block;
        for br in 1..rows {
            for bc in 1..cols {
                let (oy, ox) = ((br * block) as i64, (bc * block) as i64);
                let at = |(y, x): (i64, i64)| img.luma((oy + y) as usize, (ox + x) as usize);
                for (s, &p) in t_samples.iter_mut().zip(&targets) {
                    s.push(at(p));
                }
                for (s, &p) in r_samples.iter_mut().zip(&refs) {
                    s.push(at(p));
                }
                samples += 1;
            }
        }
    }
    if samples < 2 {
        return Err(Error::Metric(format!(
            "only {samples} block(s) with both neighbours; need at least 2"
        )));
    }

    let mut table = CorrelationTable {
        samples,
        ..Default::default()
    };
    for (ti, &(ty, tx)) in targets.iter().enumerate() {
        let dists: Vec<f64> = refs
            .iter()
            .map(|&(ry, rx)| (((ty - ry).pow(2) + (tx - rx).pow(2)) as f64).sqrt())
            .collect();
        let mean = dists.iter().sum::<f64>() / dists.len() as f64;
        let (dmin, dmax) = dists
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &d| {
                (a.min(d), b.max(d))
            });
        let span = dmax - dmin;
        for (ri, &(ry, rx)) in refs.iter().enumerate() {
            let Some(r) = pearson(&t_samples[ti], &r_samples[ri]) else {
                table.skipped += 1;
                continue;
            };
            let d = dists[ri];
            table.rows.push(CorrelationRow {
                target_y: ty,
                target_x: tx,
                ref_y: ry,
                ref_x: rx,
                distance: d,
                normalized_distance: if span > 0.0 { (d - mean) / span } else { 0.0 },
                correlation: r,
            });
        }
    }
    Ok(table)
}
