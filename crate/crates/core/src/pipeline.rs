//! Block encoder/decoder and whole-image orchestration.
//!
//! Encoding walks the wavefront: every block is predicted from its already
//! reconstructed neighbours, its residual is transformed, quantized and
//! range coded, and its closed-loop reconstruction becomes the reference for
//! later blocks. Decoding first recovers every block's residual in parallel,
//! then walks the wavefront again for prediction and reconstruction, and
//! finally runs the optional postprocessing pass over the whole image.

use std::path::Path;
use std::time::{Duration, Instant};

use crate::blocking::{
    assemble_tensor, parallel_map, partition, run_wavefront, wavefront_sets, BlockGrid, BlockIndex, BlockMap,
};
use crate::bpm::{boundary_mask, postprocess, BpmWeights, DEFAULT_BAND};
use crate::codec::{
    analysis, context_features, context_features_at, entropy_head_at, entropy_params, hyper_analysis,
    hyper_synthesis, quantize_round, synthesis, unpack_head, CodecWeights, HeadScratch, LatentCode,
    HYPER_STRIDE, LATENT_STRIDE,
};
use crate::container::{BlockStreams, Container, ContainerMeta, FLAG_BPM};
use crate::cpm::{cpm_predict, CpmWeights, PredictionContext};
use crate::entropy::{build_cdf, symbol_bits, CdfTable, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::tensor::Tensor;
use crate::weights::{load_weights, ModelConfig, WeightStore};

/// Every network of the codec, loaded once and shared by all workers.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub cpm: CpmWeights,
    pub codec: CodecWeights,
    pub bpm: BpmWeights,
}

impl Model {
    /// Builds the model; the configuration is read off the tensor shapes.
    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let config = ModelConfig::infer(store)?;
        Ok(Self {
            config,
            cpm: CpmWeights::from_store(store)?,
            codec: CodecWeights::from_store(store, &config)?,
            bpm: BpmWeights::from_store(store)?,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&load_weights(path)?)
    }
}

/// Time spent per stage, summed over blocks (so with several workers the
/// total can exceed wall-clock time).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageTimings {
    pub cpm: Duration,
    pub transformation: Duration,
    pub encode_entropy: Duration,
    pub inverse_transformation: Duration,
    pub decode_entropy: Duration,
    pub bpm: Duration,
}

impl StageTimings {
    pub fn accumulate(&mut self, other: &StageTimings) {
        self.cpm += other.cpm;
        self.transformation += other.transformation;
        self.encode_entropy += other.encode_entropy;
        self.inverse_transformation += other.inverse_transformation;
        self.decode_entropy += other.decode_entropy;
        self.bpm += other.bpm;
    }

    pub fn total(&self) -> Duration {
        self.rows().iter().map(|(_, d)| *d).sum()
    }

    pub fn rows(&self) -> [(&'static str, Duration); 6] {
        [
            ("CPM", self.cpm),
            ("Transformation", self.transformation),
            ("Encode Entropy", self.encode_entropy),
            ("Inverse Transformation", self.inverse_transformation),
            ("Decode Entropy", self.decode_entropy),
            ("BPM", self.bpm),
        ]
    }
}

fn timed<T>(bucket: &mut Duration, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *bucket += start.elapsed();
    out
}

/// Everything the encoder knows about one coded block.
#[derive(Clone, Debug)]
pub struct EncodedBlock {
    pub streams: BlockStreams,
    pub prediction: Tensor,
    /// Original block minus prediction.
    pub residual: Tensor,
    /// Closed-loop reconstruction, clamped to `[0, 1]`.
    pub recon: Tensor,
    pub z_hat: LatentCode,
    pub y_hat: LatentCode,
    /// Ideal code length of both substreams under the coding tables.
    pub estimated_bits: f64,
    pub timings: StageTimings,
}

fn hyper_tables(codec: &CodecWeights, channels: usize) -> Vec<CdfTable> {
    (0..channels)
        .map(|c| build_cdf(&[codec.factorized_component(c)]))
        .collect()
}

fn check_block(block: usize) -> Result<()> {
    if block == 0 || !block.is_multiple_of(HYPER_STRIDE) {
        return Err(Error::config(format!(
            "block size {block} must be a positive multiple of {HYPER_STRIDE}"
        )));
    }
    Ok(())
}

/// Codes one `(3, B, B)` block given its reconstructed neighbours.
pub fn encode_block(x: &Tensor, ctx: &PredictionContext, model: &Model) -> Result<EncodedBlock> {
    let (c, b, bw) = x.dims();
    if c != 3 || b != bw {
        return Err(Error::shape(format!(
            "block must be (3, B, B), got {:?}",
            x.dims()
        )));
    }
    check_block(b)?;
    let w = &model.codec;
    let mut t = StageTimings::default();

    let prediction = timed(&mut t.cpm, || cpm_predict(ctx, b, &model.cpm))?;
    let residual = x.sub(&prediction)?;

    let (y_hat, z_hat) = timed(&mut t.transformation, || -> Result<_> {
        let y = analysis(&residual, w)?;
        let z = hyper_analysis(&y, w)?;
        Ok((quantize_round(&y), quantize_round(&z)))
    })?;

    let (streams, estimated_bits) = timed(&mut t.encode_entropy, || -> Result<_> {
        let mut bits = 0.0;
        let tables = hyper_tables(w, z_hat.channels);
        let mut enc = RangeEncoder::new();
        for (i, &s) in z_hat.symbols.iter().enumerate() {
            let table = &tables[i / (z_hat.height * z_hat.width)];
            enc.encode(table, s);
            bits += symbol_bits(table, s);
        }
        let hyper = enc.finish();

        let y_tensor = y_hat.to_tensor();
        let hyper_feat = hyper_synthesis(&z_hat.to_tensor(), w)?;
        let ctx_feat = context_features(&y_tensor, w)?;
        let params = entropy_params(&hyper_feat, &ctx_feat, w)?;
        let mut enc = RangeEncoder::new();
        for py in 0..y_hat.height {
            for px in 0..y_hat.width {
                for ch in 0..y_hat.channels {
                    let table = build_cdf(&params.components(ch, py, px));
                    let s = y_hat.get(ch, py, px);
                    enc.encode(&table, s);
                    bits += symbol_bits(&table, s);
                }
            }
        }
        Ok((
            BlockStreams {
                hyper,
                main: enc.finish(),
            },
            bits,
        ))
    })?;

    let recon_residual = timed(&mut t.inverse_transformation, || synthesis(&y_hat.to_tensor(), w))?;
    let recon = reconstruct(&recon_residual, &prediction)?;
    Ok(EncodedBlock {
        streams,
        prediction,
        residual,
        recon,
        z_hat,
        y_hat,
        estimated_bits,
        timings: t,
    })
}

fn reconstruct(residual: &Tensor, prediction: &Tensor) -> Result<Tensor> {
    Ok(residual.add(prediction)?.clamp(0.0, 1.0))
}

/// Output of the first decoding phase for one block.
#[derive(Clone, Debug)]
pub struct DecodedResidual {
    pub z_hat: LatentCode,
    pub y_hat: LatentCode,
    /// Synthesized residual, before prediction is added.
    pub residual: Tensor,
    pub timings: StageTimings,
}

/// Entropy-decodes both substreams of a block and synthesizes its residual.
/// Needs no neighbour information.
pub fn decode_residual(streams: &BlockStreams, block: usize, model: &Model) -> Result<DecodedResidual> {
    check_block(block)?;
    let w = &model.codec;
    let cfg = &model.config;
    let mut t = StageTimings::default();

    let (z_hat, y_hat) = timed(&mut t.decode_entropy, || -> Result<_> {
        let hs = block / HYPER_STRIDE;
        let tables = hyper_tables(w, cfg.n_channels);
        let mut dec = RangeDecoder::new(&streams.hyper)?;
        let mut symbols = Vec::with_capacity(cfg.n_channels * hs * hs);
        for table in &tables {
            for _ in 0..hs * hs {
                symbols.push(dec.decode(table)?);
            }
        }
        let z_hat = LatentCode::new(cfg.n_channels, hs, hs, symbols)?;

        let hyper_feat = hyper_synthesis(&z_hat.to_tensor(), w)?;
        let ls = block / LATENT_STRIDE;
        let m = cfg.m_channels;
        let mut y_tensor = Tensor::zeros(m, ls, ls);
        let mut scratch = HeadScratch::new(w);
        let mut ctx = vec![0.0f32; 2 * m];
        let mut comps = Vec::with_capacity(cfg.mixtures);
        let mut dec = RangeDecoder::new(&streams.main)?;
        for py in 0..ls {
            for px in 0..ls {
                context_features_at(&y_tensor, py, px, w, &mut ctx)?;
                entropy_head_at(&hyper_feat, &ctx, py, px, w, &mut scratch)?;
                for ch in 0..m {
                    unpack_head(&scratch.out, m, cfg.mixtures, ch, &mut comps);
                    let s = dec.decode(&build_cdf(&comps))?;
                    y_tensor.set(ch, py, px, s as f32);
                }
            }
        }
        let y_hat = LatentCode::new(m, ls, ls, y_tensor.data().iter().map(|&v| v as i32).collect())?;
        Ok((z_hat, y_hat))
    })?;

    let residual = timed(&mut t.inverse_transformation, || synthesis(&y_hat.to_tensor(), w))?;
    Ok(DecodedResidual {
        z_hat,
        y_hat,
        residual,
        timings: t,
    })
}

/// Second decoding phase: adds the prediction and clamps.
pub fn predict_and_reconstruct(
    residual: &Tensor,
    ctx: &PredictionContext,
    model: &Model,
    timings: &mut StageTimings,
) -> Result<Tensor> {
    let (_, b, _) = residual.dims();
    let prediction = timed(&mut timings.cpm, || cpm_predict(ctx, b, &model.cpm))?;
    reconstruct(residual, &prediction)
}

/// Full decoder path for a single block.
pub fn decode_block(streams: &BlockStreams, ctx: &PredictionContext, model: &Model) -> Result<Tensor> {
    let block = model.config.block_size;
    let mut d = decode_residual(streams, block, model)?;
    predict_and_reconstruct(&d.residual, ctx, model, &mut d.timings)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodeOptions {
    pub block_size: usize,
    pub workers: usize,
    /// Recorded in the container; tells the decoder to postprocess.
    pub bpm: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            block_size: ModelConfig::DEFAULT_BLOCK,
            workers: crate::blocking::DEFAULT_WORKERS,
            bpm: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncodeOutput {
    pub container: Container,
    pub grid: BlockGrid,
    /// Raster order.
    pub blocks: Vec<EncodedBlock>,
    pub timings: StageTimings,
}

impl EncodeOutput {
    pub fn bytes(&self) -> Vec<u8> {
        self.container.to_bytes()
    }

    pub fn estimated_bits(&self) -> f64 {
        self.blocks.iter().map(|b| b.estimated_bits).sum()
    }

    /// Closed-loop reconstruction as the decoder will see it before
    /// postprocessing.
    pub fn reconstruction(&self) -> Result<Image> {
        Image::from_tensor(&assemble_tensor(&self.block_map(|b| &b.recon), &self.grid)?)
    }

    pub fn residual_map(&self) -> BlockMap {
        self.block_map(|b| &b.residual)
    }

    fn block_map(&self, pick: impl Fn(&EncodedBlock) -> &Tensor) -> BlockMap {
        self.grid
            .indices()
            .zip(&self.blocks)
            .map(|(i, b)| (i, pick(b).clone()))
            .collect()
    }
}

pub fn encode_image(image: &Image, model: &Model, options: &EncodeOptions) -> Result<EncodeOutput> {
    let config = model.config.with_block_size(options.block_size)?;
    let b = config.block_size;
    if b > u16::MAX as usize {
        return Err(Error::config(format!(
            "block size {b} does not fit the container"
        )));
    }
    let (grid, originals) = partition(image, b)?;
    let plan = wavefront_sets(grid.rows, grid.cols)?;
    let blocks = run_wavefront(&plan, options.workers, |index, done| {
        let ctx = PredictionContext::new(
            done.upper(index).map(|e: &EncodedBlock| &e.recon),
            done.left(index).map(|e: &EncodedBlock| &e.recon),
        );
        encode_block(&originals[&index], &ctx, model)
    })?;
    let mut timings = StageTimings::default();
    for blk in &blocks {
        timings.accumulate(&blk.timings);
    }
    let meta = ContainerMeta {
        width: image.width() as u32,
        height: image.height() as u32,
        block_size: b as u16,
        config_id: config.config_id,
        flags: if options.bpm { FLAG_BPM } else { 0 },
    };
    let container = Container::new(meta, blocks.iter().map(|e| e.streams.clone()).collect())?;
    Ok(EncodeOutput {
        container,
        grid,
        blocks,
        timings,
    })
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub image: Image,
    pub grid: BlockGrid,
    /// Block reconstructions before postprocessing, raster order.
    pub recon_blocks: Vec<Tensor>,
    /// `(z_hat, y_hat)` per block, raster order.
    pub latents: Vec<(LatentCode, LatentCode)>,
    pub bpm_applied: bool,
    pub timings: StageTimings,
}

pub fn decode_image(
    container: &Container,
    model: &Model,
    workers: usize,
    apply_bpm: bool,
) -> Result<DecodeOutput> {
    let meta = &container.meta;
    if meta.config_id != model.config.config_id {
        return Err(Error::config(format!(
            "stream was coded with config id {} but the weights are `{}`",
            meta.config_id,
            model.config.name()
        )));
    }
    let block = meta.block_size as usize;
    check_block(block)?;
    let grid = BlockGrid::new(meta.height as usize, meta.width as usize, block)?;
    if container.blocks.len() != grid.block_count() {
        return Err(Error::config("container block count does not match its grid"));
    }
    if workers == 0 {
        return Err(Error::config("worker count must be at least 1"));
    }
    let indices: Vec<BlockIndex> = grid.indices().collect();

    let residuals = parallel_map(&container.blocks, workers, |s| decode_residual(s, block, model))
        .map_err(|(i, e)| e.at_block(indices[i]))?;

    let plan = wavefront_sets(grid.rows, grid.cols)?;
    let recon = run_wavefront(&plan, workers, |index, done| {
        let ctx = PredictionContext::new(
            done.upper(index).map(|(t, _): &(Tensor, StageTimings)| t),
            done.left(index).map(|(t, _): &(Tensor, StageTimings)| t),
        );
        let mut t = StageTimings::default();
        let r = predict_and_reconstruct(&residuals[grid.raster(index)].residual, &ctx, model, &mut t)?;
        Ok((r, t))
    })?;

    let mut timings = StageTimings::default();
    for (r, (_, t)) in residuals.iter().zip(&recon) {
        timings.accumulate(&r.timings);
        timings.accumulate(t);
    }
    let recon_blocks: Vec<Tensor> = recon.into_iter().map(|(t, _)| t).collect();
    let map: BlockMap = indices
        .iter()
        .copied()
        .zip(recon_blocks.iter().cloned())
        .collect();
    let mut full = assemble_tensor(&map, &grid)?;
    if apply_bpm {
        full = timed(&mut timings.bpm, || -> Result<_> {
            let mask = boundary_mask(grid.height, grid.width, block, DEFAULT_BAND)?;
            postprocess(&full, &mask, &model.bpm)
        })?;
    }
    Ok(DecodeOutput {
        image: Image::from_tensor(&full)?,
        grid,
        recon_blocks,
        latents: residuals.into_iter().map(|r| (r.z_hat, r.y_hat)).collect(),
        bpm_applied: apply_bpm,
        timings,
    })
}

/// Bits per pixel of a coded stream of `bytes` bytes.
pub fn bits_per_pixel(bytes: usize, height: usize, width: usize) -> f64 {
    8.0 * bytes as f64 / (height * width) as f64
}
