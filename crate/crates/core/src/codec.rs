//! Residual transforms, hyperprior, autoregressive context model, mixture
//! parameter head and quantizers.
//!
//! The entropy head is evaluated one latent position at a time on the
//! decoder. Every routine here that the decoder repeats per position has a
//! whole-tensor counterpart with the same accumulation order, so the encoder
//! can use the fast path and still produce bit-identical tables.

use crate::entropy::Component;
use crate::error::{Error, Result};
use crate::tensor::{activation, masked_conv2d, Activation, MaskType, MaskedConvAt, Pointwise, Tensor};
use crate::weights::{Layer, ModelConfig, Pcg32, WeightStore};

pub const SCALE_MIN: f32 = 1e-3;
pub const SCALE_MAX: f32 = 256.0;
pub const SYMBOL_CLAMP: (i32, i32) = (-128, 127);
/// Spatial reduction of the main latent.
pub const LATENT_STRIDE: usize = 16;
/// Spatial reduction of the hyper latent.
pub const HYPER_STRIDE: usize = 64;
pub const ENTROPY_HIDDEN: [usize; 2] = [640, 512];

#[derive(Clone, Debug)]
pub struct CodecWeights {
    pub config: ModelConfig,
    analysis: [Layer; 4],
    synthesis: [Layer; 4],
    hyper_analysis: [Layer; 2],
    hyper_synthesis: [Layer; 2],
    context: Layer,
    entropy: [Layer; 3],
    factorized_mean: Vec<f32>,
    factorized_log_scale: Vec<f32>,
    context_at: MaskedConvAt,
    entropy_at: [Pointwise; 3],
}

impl CodecWeights {
    pub fn from_store(store: &WeightStore, config: &ModelConfig) -> Result<Self> {
        let l = |name: &str| Layer::load(store, &format!("codec.{name}"));
        let context = l("context")?;
        let entropy = [l("entropy.0")?, l("entropy.1")?, l("entropy.2")?];
        let w = Self {
            config: *config,
            analysis: [
                l("analysis.0")?,
                l("analysis.1")?,
                l("analysis.2")?,
                l("analysis.3")?,
            ],
            synthesis: [
                l("synthesis.0")?,
                l("synthesis.1")?,
                l("synthesis.2")?,
                l("synthesis.3")?,
            ],
            hyper_analysis: [l("hyper_analysis.0")?, l("hyper_analysis.1")?],
            hyper_synthesis: [l("hyper_synthesis.0")?, l("hyper_synthesis.1")?],
            context_at: MaskedConvAt::new(&context.kernel)?,
            entropy_at: [
                Pointwise::new(&entropy[0].kernel)?,
                Pointwise::new(&entropy[1].kernel)?,
                Pointwise::new(&entropy[2].kernel)?,
            ],
            context,
            entropy,
            factorized_mean: store.vector("codec.factorized.mean", config.n_channels)?,
            factorized_log_scale: store.vector("codec.factorized.log_scale", config.n_channels)?,
        };
        let m = config.m_channels;
        let head = w.entropy[2].kernel.out_channels();
        if head != 3 * config.mixtures * m || w.analysis[3].kernel.out_channels() != m {
            return Err(Error::config(format!(
                "codec weights do not match config `{}`",
                config.name()
            )));
        }
        Ok(w)
    }

    fn m(&self) -> usize {
        self.config.m_channels
    }

    fn k(&self) -> usize {
        self.config.mixtures
    }

    /// Per-channel prior over the hyper latent.
    pub fn factorized_component(&self, channel: usize) -> Component {
        let scale = self.factorized_log_scale[channel]
            .exp()
            .clamp(SCALE_MIN, SCALE_MAX);
        Component::new(1.0, self.factorized_mean[channel], scale)
    }
}

fn leaky(t: Tensor) -> Tensor {
    activation(&t, Activation::LeakyRelu)
}

fn check_divisible(t: &Tensor, by: usize, what: &str) -> Result<()> {
    let (_, h, w) = t.dims();
    if h == 0 || w == 0 || h % by != 0 || w % by != 0 {
        return Err(Error::shape(format!(
            "{what} needs spatial dims divisible by {by}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// `(3, B, B)` residual to `(M, B/16, B/16)` latent.
pub fn analysis(residual: &Tensor, w: &CodecWeights) -> Result<Tensor> {
    check_divisible(residual, LATENT_STRIDE, "analysis")?;
    let mut x = residual.clone();
    for (i, layer) in w.analysis.iter().enumerate() {
        x = layer.conv(&x, 2, 2)?;
        if i + 1 < w.analysis.len() {
            x = leaky(x);
        }
    }
    Ok(x)
}

/// `(M, h, w)` latent to `(3, 16h, 16w)` residual.
pub fn synthesis(latent: &Tensor, w: &CodecWeights) -> Result<Tensor> {
    let mut x = latent.clone();
    for (i, layer) in w.synthesis.iter().enumerate() {
        x = layer.tconv(&x, 2, 2, 1)?;
        if i + 1 < w.synthesis.len() {
            x = leaky(x);
        }
    }
    Ok(x)
}

/// `|y|` through two stride-2 stages to `(N, h/4, w/4)`.
pub fn hyper_analysis(y: &Tensor, w: &CodecWeights) -> Result<Tensor> {
    check_divisible(y, HYPER_STRIDE / LATENT_STRIDE, "hyper analysis")?;
    let x = leaky(w.hyper_analysis[0].conv(&y.map(f32::abs), 2, 2)?);
    w.hyper_analysis[1].conv(&x, 2, 2)
}

/// Decoded hyper latent to `(2M, 4h, 4w)` features.
pub fn hyper_synthesis(z_hat: &Tensor, w: &CodecWeights) -> Result<Tensor> {
    let x = leaky(w.hyper_synthesis[0].tconv(z_hat, 2, 2, 1)?);
    w.hyper_synthesis[1].tconv(&x, 2, 2, 1)
}

/// Causal `(2M, h, w)` context features of a (partially) decoded latent.
pub fn context_features(y_hat: &Tensor, w: &CodecWeights) -> Result<Tensor> {
    masked_conv2d(y_hat, &w.context.kernel, &w.context.bias, MaskType::A)
}

/// Context features at a single latent position; bit-identical to the
/// corresponding element of [`context_features`].
pub fn context_features_at(
    y_hat: &Tensor,
    y: usize,
    x: usize,
    w: &CodecWeights,
    out: &mut [f32],
) -> Result<()> {
    w.context_at.apply(y_hat, &w.context.bias, y, x, out)
}

/// Mixture parameters for every latent element, stored element-major with
/// the `K` components of an element adjacent.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub mixtures: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f32>,
    pub means: Vec<f32>,
    pub scales: Vec<f32>,
}

impl GmmParams {
    fn zeros(mixtures: usize, channels: usize, height: usize, width: usize) -> Self {
        let n = mixtures * channels * height * width;
        Self {
            mixtures,
            channels,
            height,
            width,
            weights: vec![0.0; n],
            means: vec![0.0; n],
            scales: vec![0.0; n],
        }
    }

    pub fn element_count(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn offset(&self, c: usize, y: usize, x: usize) -> usize {
        ((c * self.height + y) * self.width + x) * self.mixtures
    }

    pub fn components(&self, c: usize, y: usize, x: usize) -> Vec<Component> {
        let o = self.offset(c, y, x);
        (o..o + self.mixtures)
            .map(|i| Component::new(self.weights[i], self.means[i], self.scales[i]))
            .collect()
    }

    fn write(&mut self, y: usize, x: usize, head: &[f32]) {
        let (k, m) = (self.mixtures, self.channels);
        let mut comps = Vec::with_capacity(k);
        for c in 0..m {
            unpack_head(head, m, k, c, &mut comps);
            let o = self.offset(c, y, x);
            for (i, comp) in comps.iter().enumerate() {
                self.weights[o + i] = comp.weight;
                self.means[o + i] = comp.mean;
                self.scales[o + i] = comp.scale;
            }
        }
    }
}

/// Reads channel `c`'s mixture out of a `3KM` head vector laid out as
/// `[logits | means | log-scales]`, each block indexed `k * M + c`.
pub fn unpack_head(head: &[f32], m: usize, k: usize, c: usize, out: &mut Vec<Component>) {
    out.clear();
    let logit = |t: usize| head[t * m + c];
    let max = (0..k).map(logit).fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = (0..k).map(|t| (logit(t) - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    for (t, e) in exps.iter().enumerate() {
        let mean = head[(k + t) * m + c];
        let scale = head[(2 * k + t) * m + c].exp().clamp(SCALE_MIN, SCALE_MAX);
        out.push(Component::new(e / sum, mean, scale));
    }
}

/// The three pointwise layers of the parameter head applied to one
/// `[hyper, context]` feature vector.
pub struct HeadScratch {
    input: Vec<f32>,
    h0: Vec<f32>,
    h1: Vec<f32>,
    pub out: Vec<f32>,
}

impl HeadScratch {
    pub fn new(w: &CodecWeights) -> Self {
        let m = w.m();
        Self {
            input: vec![0.0; 4 * m],
            h0: vec![0.0; ENTROPY_HIDDEN[0]],
            h1: vec![0.0; ENTROPY_HIDDEN[1]],
            out: vec![0.0; 3 * w.k() * m],
        }
    }
}

/// Runs the parameter head at `(y, x)` given the hyper features and the
/// context vector already computed for that position; result in
/// `scratch.out`.
pub fn entropy_head_at(
    hyper_feat: &Tensor,
    ctx: &[f32],
    y: usize,
    x: usize,
    w: &CodecWeights,
    scratch: &mut HeadScratch,
) -> Result<()> {
    let two_m = 2 * w.m();
    if hyper_feat.channels() != two_m || ctx.len() != two_m {
        return Err(Error::shape("entropy head inputs must have 2M channels each"));
    }
    for c in 0..two_m {
        scratch.input[c] = hyper_feat.get(c, y, x);
    }
    scratch.input[two_m..].copy_from_slice(ctx);
    let [l0, l1, l2] = &w.entropy;
    let [p0, p1, p2] = &w.entropy_at;
    p0.apply(&scratch.input, &l0.bias, &mut scratch.h0)?;
    Activation::LeakyRelu.apply_in_place(&mut scratch.h0);
    p1.apply(&scratch.h0, &l1.bias, &mut scratch.h1)?;
    Activation::LeakyRelu.apply_in_place(&mut scratch.h1);
    p2.apply(&scratch.h1, &l2.bias, &mut scratch.out)
}

/// Mixture parameters for the whole latent from `(2M)` hyper and context
/// feature maps.
pub fn entropy_params(hyper_feat: &Tensor, ctx_feat: &Tensor, w: &CodecWeights) -> Result<GmmParams> {
    if hyper_feat.dims() != ctx_feat.dims() {
        return Err(Error::shape(format!(
            "hyper features {:?} and context features {:?} differ",
            hyper_feat.dims(),
            ctx_feat.dims()
        )));
    }
    let x = Tensor::concat(&[hyper_feat, ctx_feat])?;
    let h = leaky(w.entropy[0].conv(&x, 1, 0)?);
    let h = leaky(w.entropy[1].conv(&h, 1, 0)?);
    let head = w.entropy[2].conv(&h, 1, 0)?;
    let (_, hh, ww) = head.dims();
    let mut params = GmmParams::zeros(w.k(), w.m(), hh, ww);
    let mut vec = vec![0.0; head.channels()];
    for y in 0..hh {
        for x in 0..ww {
            for (c, v) in vec.iter_mut().enumerate() {
                *v = head.get(c, y, x);
            }
            params.write(y, x, &vec);
        }
    }
    Ok(params)
}

/// Integer latent symbols, channel-major like [`Tensor`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentCode {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub symbols: Vec<i32>,
}

impl LatentCode {
    pub fn new(channels: usize, height: usize, width: usize, symbols: Vec<i32>) -> Result<Self> {
        if symbols.len() != channels * height * width {
            return Err(Error::shape("latent symbol count does not match dims"));
        }
        Ok(Self {
            channels,
            height,
            width,
            symbols,
        })
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> i32 {
        self.symbols[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.get(c, y, x) as f32
        })
    }
}

/// Round half away from zero, then clamp to the symbol alphabet.
pub fn round_symbol(v: f32) -> i32 {
    let (lo, hi) = SYMBOL_CLAMP;
    if v.is_nan() {
        return 0;
    }
    (v.round().clamp(lo as f32, hi as f32)) as i32
}

pub fn quantize_round(y: &Tensor) -> LatentCode {
    let (c, h, w) = y.dims();
    LatentCode {
        channels: c,
        height: h,
        width: w,
        symbols: y.data().iter().map(|&v| round_symbol(v)).collect(),
    }
}

/// Forward pass of the straight-through quantizer: plain rounding.
pub fn quantize_ste_forward(y: &Tensor) -> LatentCode {
    quantize_round(y)
}

/// Training-time surrogate: `y + u` with `u` uniform in `[-1/2, 1/2)`.
pub fn quantize_noise(y: &Tensor, rng: &mut Pcg32) -> Tensor {
    let (c, h, w) = y.dims();
    let data = y.data().iter().map(|&v| v + rng.uniform(-0.5, 0.5)).collect();
    Tensor::new(c, h, w, data).expect("dims unchanged")
}
