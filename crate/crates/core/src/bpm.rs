//! Boundary-aware postprocessing: a block-boundary mask, a mask-guided
//! multiscale restoration network and the boundary-weighted loss.

use crate::error::{Error, Result};
use crate::tensor::{activation, nonlocal_block, upsample_nearest, Activation, NonLocalWeights, Tensor};
use crate::weights::{Layer, WeightStore};

pub const FEATURES: usize = 32;
pub const GROWTH: usize = 16;
/// Working resolutions relative to the input.
pub const SCALES: [usize; 3] = [1, 2, 4];
pub const RDBS_PER_GRDB: usize = 4;
pub const LAYERS_PER_RDB: usize = 8;
pub const DEFAULT_BAND: usize = 8;
pub const DEFAULT_ALPHA: f64 = 10.0;

/// Binary `H x W` plane marking pixels near interior block boundaries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BoundaryMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(1, self.height, self.width, |_, y, x| {
            self.data[y * self.width + x] as f32
        })
    }
}

/// Marks `band / 2` pixels on each side of every interior block edge.
pub fn boundary_mask(height: usize, width: usize, block: usize, band: usize) -> Result<BoundaryMask> {
    if band < 2 || !band.is_multiple_of(2) {
        return Err(Error::config(format!(
            "boundary band must be even and at least 2, got {band}"
        )));
    }
    if block == 0 || height == 0 || width == 0 {
        return Err(Error::shape("boundary mask needs non-zero dims"));
    }
    let half = band / 2;
    let near_edge = |v: usize, len: usize| {
        (1..len.div_ceil(block)).any(|k| {
            let edge = k * block;
            v + half >= edge && v < edge + half
        })
    };
    let rows: Vec<bool> = (0..height).map(|y| near_edge(y, height)).collect();
    let cols: Vec<bool> = (0..width).map(|x| near_edge(x, width)).collect();
    let mut data = vec![0u8; height * width];
    for y in 0..height {
        for x in 0..width {
            data[y * width + x] = (rows[y] || cols[x]) as u8;
        }
    }
    Ok(BoundaryMask { height, width, data })
}

/// `MSE(X, X̂) + α · MSE(M ⊙ X, M ⊙ X̂)`, both means over every element.
pub fn boundary_loss(x: &Tensor, x_hat: &Tensor, mask: &BoundaryMask, alpha: f64) -> Result<f64> {
    let (c, h, w) = x.dims();
    if x_hat.dims() != (c, h, w) || mask.height != h || mask.width != w {
        return Err(Error::shape(format!(
            "boundary loss inputs {:?}, {:?} and mask {}x{} disagree",
            x.dims(),
            x_hat.dims(),
            mask.height,
            mask.width
        )));
    }
    let n = (c * h * w) as f64;
    let mut plain = 0.0f64;
    let mut masked = 0.0f64;
    for ch in 0..c {
        let (a, b) = (x.plane(ch), x_hat.plane(ch));
        for i in 0..h * w {
            let d = (a[i] - b[i]) as f64;
            plain += d * d;
            if mask.data[i] != 0 {
                masked += d * d;
            }
        }
    }
    Ok(plain / n + alpha * masked / n)
}

#[derive(Clone, Debug)]
struct Rdb {
    layers: Vec<Layer>,
    fuse: Layer,
}

#[derive(Clone, Debug)]
struct Grdb {
    rdbs: Vec<Rdb>,
    fuse: Layer,
}

#[derive(Clone, Debug)]
pub struct BpmWeights {
    head: Layer,
    attention: Layer,
    down2: Layer,
    down4: Layer,
    scales: Vec<Grdb>,
    nonlocal: NonLocalWeights,
    fusion: Layer,
    tail: Layer,
}

impl BpmWeights {
    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let l = |name: &str| Layer::load(store, &format!("bpm.{name}"));
        let mut scales = Vec::new();
        for s in SCALES {
            let mut rdbs = Vec::new();
            for r in 0..RDBS_PER_GRDB {
                let layers = (0..LAYERS_PER_RDB)
                    .map(|i| l(&format!("scale{s}.rdb{r}.layer{i}")))
                    .collect::<Result<_>>()?;
                rdbs.push(Rdb {
                    layers,
                    fuse: l(&format!("scale{s}.rdb{r}.fuse"))?,
                });
            }
            scales.push(Grdb {
                rdbs,
                fuse: l(&format!("scale{s}.fuse"))?,
            });
        }
        let pair = |name: &str| l(name).map(|layer| (layer.kernel, layer.bias));
        Ok(Self {
            head: l("head")?,
            attention: l("attention")?,
            down2: l("down2")?,
            down4: l("down4")?,
            scales,
            nonlocal: NonLocalWeights {
                theta: pair("nonlocal.theta")?,
                phi: pair("nonlocal.phi")?,
                g: pair("nonlocal.g")?,
                out: pair("nonlocal.out")?,
            },
            fusion: l("fusion")?,
            tail: l("tail")?,
        })
    }

    /// Zeroes the output convolution, turning the network into the identity.
    pub fn zero_tail(&mut self) {
        let (o, i, kh, kw) = self.tail.kernel.dims();
        self.tail.kernel = crate::tensor::Kernel::zeros(o, i, kh, kw);
        self.tail.bias.fill(0.0);
    }
}

fn leaky(t: Tensor) -> Tensor {
    activation(&t, Activation::LeakyRelu)
}

fn rdb(x: &Tensor, w: &Rdb) -> Result<Tensor> {
    let mut dense = x.clone();
    for layer in &w.layers {
        let grown = leaky(layer.same(&dense)?);
        dense = Tensor::concat(&[&dense, &grown])?;
    }
    w.fuse.same(&dense)?.add(x)
}

fn grdb(x: &Tensor, w: &Grdb) -> Result<Tensor> {
    let mut outs = Vec::with_capacity(w.rdbs.len());
    let mut cur = x.clone();
    for block in &w.rdbs {
        cur = rdb(&cur, block)?;
        outs.push(cur.clone());
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    w.fuse.same(&Tensor::concat(&refs)?)?.add(x)
}

/// Restores an assembled `(3, H, W)` reconstruction; output clamped to
/// `[0, 1]`.
pub fn postprocess(image: &Tensor, mask: &BoundaryMask, w: &BpmWeights) -> Result<Tensor> {
    let (c, h, wd) = image.dims();
    if c != 3 || mask.height != h || mask.width != wd {
        return Err(Error::shape(format!(
            "postprocess input {:?} with a {}x{} mask",
            image.dims(),
            mask.height,
            mask.width
        )));
    }
    let m = mask.to_tensor();
    let feat = leaky(w.head.same(&Tensor::concat(&[image, &m])?)?);
    let gate = activation(
        &w.attention.same(&Tensor::concat(&[&feat, &m])?)?,
        Activation::Sigmoid,
    );
    let feat = feat.mul(&gate)?;

    let s1 = feat;
    let s2 = leaky(w.down2.conv(&s1, 2, 1)?);
    let s4 = leaky(w.down4.conv(&s2, 2, 1)?);

    let g1 = grdb(&s1, &w.scales[0])?;
    let g2 = grdb(&s2, &w.scales[1])?;
    let g4 = nonlocal_block(&grdb(&s4, &w.scales[2])?, &w.nonlocal)?;

    let up2 = upsample_nearest(&g2, 2, h, wd)?;
    let up4 = upsample_nearest(&g4, 4, h, wd)?;
    let fused = w.fusion.same(&Tensor::concat(&[&g1, &up2, &up4])?)?;
    let delta = w.tail.same(&fused)?;
    Ok(image.add(&delta)?.clamp(0.0, 1.0))
}
