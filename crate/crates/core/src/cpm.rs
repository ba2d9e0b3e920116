//! Contextual prediction of a block from its reconstructed upper and left
//! neighbours.
//!
//! Each neighbour goes through a shared three-layer feature extractor. The
//! upper features are averaged down each column and copied back over the
//! block, the left features across each row; the two are summed. A small
//! U-Net then maps `[fused, upper, left]` to a 3-channel prediction.

use crate::error::{Error, Result};
use crate::tensor::{activation, broadcast_expand, strip_pool, Activation, StripDirection, Tensor};
use crate::weights::{Layer, WeightStore};

/// Feature extractor width.
pub const FEATURES: usize = 64;
/// U-Net widths at full, half and quarter resolution.
pub const UNET_WIDTHS: [usize; 3] = [32, 64, 128];

/// Reconstructed neighbours of the block being predicted.
#[derive(Clone, Copy, Debug, Default)]
pub struct PredictionContext<'a> {
    pub upper: Option<&'a Tensor>,
    pub left: Option<&'a Tensor>,
}

impl<'a> PredictionContext<'a> {
    pub fn new(upper: Option<&'a Tensor>, left: Option<&'a Tensor>) -> Self {
        Self { upper, left }
    }

    pub fn is_complete(&self) -> bool {
        self.upper.is_some() && self.left.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct CpmWeights {
    extract: [Layer; 3],
    enc0: [Layer; 2],
    down1: [Layer; 2],
    down2: [Layer; 2],
    up1t: Layer,
    up1c: Layer,
    up2t: Layer,
    up2c: Layer,
    out: Layer,
}

impl CpmWeights {
    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let l = |name: &str| Layer::load(store, &format!("cpm.{name}"));
        Ok(Self {
            extract: [l("extract.0")?, l("extract.1")?, l("extract.2")?],
            enc0: [l("unet.enc0a")?, l("unet.enc0b")?],
            down1: [l("unet.down1a")?, l("unet.down1b")?],
            down2: [l("unet.down2a")?, l("unet.down2b")?],
            up1t: l("unet.up1t")?,
            up1c: l("unet.up1c")?,
            up2t: l("unet.up2t")?,
            up2c: l("unet.up2c")?,
            out: l("unet.out")?,
        })
    }
}

fn leaky(t: Tensor) -> Tensor {
    activation(&t, Activation::LeakyRelu)
}

/// Shared feature extractor applied to one reference block.
pub fn extract_features(block: &Tensor, w: &CpmWeights) -> Result<Tensor> {
    let mut x = leaky(w.extract[0].same(block)?);
    for layer in &w.extract[1..] {
        x = leaky(layer.same(&x)?);
    }
    Ok(x)
}

/// Strip-pooled fusion of both neighbours' features, `(FEATURES, B, B)`.
pub fn fuse_context(ctx: &PredictionContext, w: &CpmWeights) -> Result<Tensor> {
    let (Some(upper), Some(left)) = (ctx.upper, ctx.left) else {
        return Err(Error::config(
            "fuse_context needs both neighbours; edge blocks go through cpm_predict",
        ));
    };
    if upper.dims() != left.dims() {
        return Err(Error::shape(format!(
            "neighbour dims differ: {:?} vs {:?}",
            upper.dims(),
            left.dims()
        )));
    }
    fuse_features(&extract_features(upper, w)?, &extract_features(left, w)?)
}

/// Pools upper features down columns and left features along rows, expands
/// both back and adds them.
pub fn fuse_features(upper: &Tensor, left: &Tensor) -> Result<Tensor> {
    let (_, h, wd) = upper.dims();
    let v = broadcast_expand(&strip_pool(upper, StripDirection::Vertical)?, h, wd)?;
    let hz = broadcast_expand(&strip_pool(left, StripDirection::Horizontal)?, h, wd)?;
    v.add(&hz)
}

/// Prediction for a `block`-sized block. Blocks missing either neighbour
/// get an all-zero prediction.
pub fn cpm_predict(ctx: &PredictionContext, block: usize, w: &CpmWeights) -> Result<Tensor> {
    let (Some(upper), Some(left)) = (ctx.upper, ctx.left) else {
        return Ok(Tensor::zeros(3, block, block));
    };
    if upper.dims() != (3, block, block) || left.dims() != (3, block, block) {
        return Err(Error::shape(format!(
            "neighbours must be (3, {block}, {block}), got {:?} and {:?}",
            upper.dims(),
            left.dims()
        )));
    }
    if !block.is_multiple_of(4) {
        return Err(Error::config(format!(
            "prediction network needs a block size divisible by 4, got {block}"
        )));
    }
    let fused = fuse_context(ctx, w)?;
    let x = Tensor::concat(&[&fused, upper, left])?;

    let e0 = leaky(w.enc0[1].same(&leaky(w.enc0[0].same(&x)?))?);
    let e1 = leaky(w.down1[1].same(&leaky(w.down1[0].conv(&e0, 2, 1)?))?);
    let e2 = leaky(w.down2[1].same(&leaky(w.down2[0].conv(&e1, 2, 1)?))?);

    let u1 = leaky(w.up1t.tconv(&e2, 2, 1, 0)?);
    let u1 = leaky(w.up1c.same(&Tensor::concat(&[&u1, &e1])?)?);
    let u2 = leaky(w.up2t.tconv(&u1, 2, 1, 0)?);
    let u2 = leaky(w.up2c.same(&Tensor::concat(&[&u2, &e0])?)?);
    w.out.same(&u2)
}
