//! `.lbhw` weight files, model configurations and reproducible toy weights.
//!
//! File layout (little-endian):
//!
//! ```text
//! "LBHW" | u16 version (=1) | u32 entry count
//! per entry: u16 name length | name bytes (UTF-8) | u8 rank | u32 dims[rank] | f32 payload
//! u32 CRC32 (IEEE) of every preceding byte
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, tconv2d, Kernel, Tensor};
use crate::{bpm, cpm};

pub const WEIGHT_MAGIC: &[u8; 4] = b"LBHW";
pub const WEIGHT_VERSION: u16 = 1;

/// Stream selector used by [`toy_init`].
pub const TOY_INIT_STREAM: u64 = 54;
pub const TOY_INIT_BOUND: f64 = 0.05;

const PCG_MULTIPLIER: u64 = 6364136223846793005;

/// One PCG32 (XSH-RR) step. Returns the output for `state` and the advanced
/// state. `inc` must be odd.
#[inline]
pub fn pcg32_next(state: u64, inc: u64) -> (u32, u64) {
    let next = state.wrapping_mul(PCG_MULTIPLIER).wrapping_add(inc);
    let xorshifted = (((state >> 18) ^ state) >> 27) as u32;
    let rot = (state >> 59) as u32;
    (xorshifted.rotate_right(rot), next)
}

/// PCG32 generator seeded like the reference `pcg32_srandom_r`.
#[derive(Clone, Debug)]
pub struct Pcg32 {
    state: u64,
    inc: u64,
}

impl Pcg32 {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = Self {
            state: 0,
            inc: (stream << 1) | 1,
        };
        rng.next_u32();
        rng.state = rng.state.wrapping_add(seed);
        rng.next_u32();
        rng
    }

    pub fn next_u32(&mut self) -> u32 {
        let (value, state) = pcg32_next(self.state, self.inc);
        self.state = state;
        value
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u32() >> 8) as f64 / (1u32 << 24) as f64
    }

    /// Uniform in `[lo, hi)`, computed in double precision then rounded.
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        (lo as f64 + (hi as f64 - lo as f64) * self.next_unit()) as f32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub m_channels: usize,
    pub mixtures: usize,
    pub block_size: usize,
    pub config_id: u8,
}

impl ModelConfig {
    pub const MIXTURES: usize = 3;
    pub const DEFAULT_BLOCK: usize = 128;

    /// Low-rate models: N = 128, M = 192.
    pub fn low() -> Self {
        Self {
            n_channels: 128,
            m_channels: 192,
            mixtures: Self::MIXTURES,
            block_size: Self::DEFAULT_BLOCK,
            config_id: 0,
        }
    }

    /// High-rate models: N = 256, M = 448.
    pub fn high() -> Self {
        Self {
            n_channels: 256,
            m_channels: 448,
            mixtures: Self::MIXTURES,
            block_size: Self::DEFAULT_BLOCK,
            config_id: 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Self::low()),
            1 => Ok(Self::high()),
            _ => Err(Error::config(format!("unknown model config id {id}"))),
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "low" => Ok(Self::low()),
            "high" => Ok(Self::high()),
            _ => Err(Error::config(format!(
                "unknown model config `{name}` (expected low or high)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        if self.config_id == 0 {
            "low"
        } else {
            "high"
        }
    }

    pub fn with_block_size(mut self, block_size: usize) -> Result<Self> {
        if block_size == 0 || !block_size.is_multiple_of(64) {
            return Err(Error::config(format!(
                "block size {block_size} must be a positive multiple of 64"
            )));
        }
        self.block_size = block_size;
        Ok(self)
    }

    /// Recovers the configuration from the transform shapes in a store.
    pub fn infer(store: &WeightStore) -> Result<Self> {
        let n = store.get("codec.analysis.0.weight")?.dims[0];
        let m = store.get("codec.analysis.3.weight")?.dims[0];
        [Self::low(), Self::high()]
            .into_iter()
            .find(|c| c.n_channels == n && c.m_channels == m)
            .ok_or_else(|| Error::config(format!("weights have N={n}, M={m}: not a known config")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered named tensors. Names are unique; lookups are exact-match.
#[derive(Clone, Debug, Default)]
pub struct WeightStore {
    entries: Vec<WeightEntry>,
    index: HashMap<String, usize>,
}

impl PartialEq for WeightStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.dims == b.dims
                    && a.data.len() == b.data.len()
                    && a.data
                        .iter()
                        .zip(&b.data)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "`{name}`: dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate weight name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(WeightEntry { name, dims, data });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[WeightEntry] {
        &self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&WeightEntry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut WeightEntry> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(Error::MissingParam(name.to_string())),
        }
    }

    /// Loads `name` as a rank-4 kernel.
    pub fn kernel(&self, name: &str) -> Result<Kernel> {
        let entry = self.get(name)?;
        match entry.dims[..] {
            [o, i, kh, kw] => Kernel::new(o, i, kh, kw, entry.data.clone()),
            _ => Err(Error::shape(format!(
                "`{name}` has dims {:?}, expected a rank-4 kernel",
                entry.dims
            ))),
        }
    }

    pub fn vector(&self, name: &str, len: usize) -> Result<Vec<f32>> {
        let entry = self.get(name)?;
        if entry.dims != [len] {
            return Err(Error::shape(format!(
                "`{name}` has dims {:?}, expected [{len}]",
                entry.dims
            )));
        }
        Ok(entry.data.clone())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let entry = self.get(name)?;
        match entry.dims[..] {
            [c, h, w] => Tensor::new(c, h, w, entry.data.clone()),
            _ => Err(Error::shape(format!("`{name}` is not rank 3"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .entries
            .iter()
            .map(|e| 3 + e.name.len() + 4 * e.dims.len() + 4 * e.data.len())
            .sum();
        let mut out = Vec::with_capacity(14 + payload);
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != WEIGHT_MAGIC {
            return Err(r.error_at(0, format!("bad magic {magic:02x?}, expected \"LBHW\"")));
        }
        let version = r.u16()?;
        if version != WEIGHT_VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let entry_start = r.pos;
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.error_at(entry_start + 2, "entry name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| r.error_at(entry_start, format!("`{name}` dims overflow")))?;
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store
                .insert(name, dims, data)
                .map_err(|e| r.error_at(entry_start, e.to_string()))?;
        }
        let body_end = r.pos;
        let stored = r.u32()?;
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(r.error_at(
                body_end,
                format!("crc mismatch: stored {stored:08x}, computed {computed:08x}"),
            ));
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, "trailing bytes after crc"));
        }
        Ok(store)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn error_at(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::WeightFormat {
            offset,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(
                self.pos,
                format!(
                    "truncated: needed {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, store.to_bytes())?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    WeightStore::from_bytes(&fs::read(path)?)
}

/// A kernel with its bias, loaded from `<prefix>.weight` / `<prefix>.bias`.
#[derive(Clone, Debug)]
pub struct Layer {
    pub kernel: Kernel,
    pub bias: Vec<f32>,
}

impl Layer {
    pub fn load(store: &WeightStore, prefix: &str) -> Result<Self> {
        let kernel = store.kernel(&format!("{prefix}.weight"))?;
        let bias = store.vector(&format!("{prefix}.bias"), kernel.out_channels())?;
        Ok(Self { kernel, bias })
    }

    pub fn conv(&self, input: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        conv2d(input, &self.kernel, &self.bias, stride, pad)
    }

    /// Stride-1 convolution that keeps the spatial size.
    pub fn same(&self, input: &Tensor) -> Result<Tensor> {
        let (_, _, k, _) = self.kernel.dims();
        conv2d(input, &self.kernel, &self.bias, 1, k / 2)
    }

    pub fn tconv(&self, input: &Tensor, stride: usize, pad: usize, output_padding: usize) -> Result<Tensor> {
        tconv2d(input, &self.kernel, &self.bias, stride, pad, output_padding)
    }
}

/// Whether a parameter is a bias (zero at toy init) or a drawn weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub kind: ParamKind,
}

fn layer(table: &mut Vec<ParamSpec>, name: &str, out: usize, inp: usize, k: usize) {
    table.push(ParamSpec {
        name: format!("{name}.weight"),
        dims: vec![out, inp, k, k],
        kind: ParamKind::Weight,
    });
    table.push(ParamSpec {
        name: format!("{name}.bias"),
        dims: vec![out],
        kind: ParamKind::Bias,
    });
}

/// Every parameter of the model in file order. Kernels are
/// `(out, in, k, k)` for both convolutions and transposed convolutions.
pub fn parameter_table(config: &ModelConfig) -> Vec<ParamSpec> {
    let n = config.n_channels;
    let m = config.m_channels;
    let k = config.mixtures;
    let mut t = Vec::new();

    // Contextual prediction.
    let f = cpm::FEATURES;
    let [w0, w1, w2] = cpm::UNET_WIDTHS;
    layer(&mut t, "cpm.extract.0", f, 3, 3);
    layer(&mut t, "cpm.extract.1", f, f, 3);
    layer(&mut t, "cpm.extract.2", f, f, 3);
    layer(&mut t, "cpm.unet.enc0a", w0, f + 6, 3);
    layer(&mut t, "cpm.unet.enc0b", w0, w0, 3);
    layer(&mut t, "cpm.unet.down1a", w1, w0, 3);
    layer(&mut t, "cpm.unet.down1b", w1, w1, 3);
    layer(&mut t, "cpm.unet.down2a", w2, w1, 3);
    layer(&mut t, "cpm.unet.down2b", w2, w2, 3);
    layer(&mut t, "cpm.unet.up1t", w1, w2, 4);
    layer(&mut t, "cpm.unet.up1c", w1, 2 * w1, 3);
    layer(&mut t, "cpm.unet.up2t", w0, w1, 4);
    layer(&mut t, "cpm.unet.up2c", w0, 2 * w0, 3);
    layer(&mut t, "cpm.unet.out", 3, w0, 1);

    // Residual transforms and entropy model.
    layer(&mut t, "codec.analysis.0", n, 3, 5);
    layer(&mut t, "codec.analysis.1", n, n, 5);
    layer(&mut t, "codec.analysis.2", n, n, 5);
    layer(&mut t, "codec.analysis.3", m, n, 5);
    layer(&mut t, "codec.synthesis.0", n, m, 5);
    layer(&mut t, "codec.synthesis.1", n, n, 5);
    layer(&mut t, "codec.synthesis.2", n, n, 5);
    layer(&mut t, "codec.synthesis.3", 3, n, 5);
    layer(&mut t, "codec.hyper_analysis.0", n, m, 5);
    layer(&mut t, "codec.hyper_analysis.1", n, n, 5);
    layer(&mut t, "codec.hyper_synthesis.0", m, n, 5);
    layer(&mut t, "codec.hyper_synthesis.1", 2 * m, m, 5);
    layer(&mut t, "codec.context", 2 * m, m, 5);
    layer(&mut t, "codec.entropy.0", 640, 4 * m, 1);
    layer(&mut t, "codec.entropy.1", 512, 640, 1);
    layer(&mut t, "codec.entropy.2", 3 * k * m, 512, 1);
    for name in ["codec.factorized.mean", "codec.factorized.log_scale"] {
        t.push(ParamSpec {
            name: name.to_string(),
            dims: vec![n],
            kind: ParamKind::Weight,
        });
    }

    // Boundary-aware postprocessing.
    let f = bpm::FEATURES;
    let g = bpm::GROWTH;
    layer(&mut t, "bpm.head", f, 4, 3);
    layer(&mut t, "bpm.attention", f, f + 1, 3);
    layer(&mut t, "bpm.down2", f, f, 3);
    layer(&mut t, "bpm.down4", f, f, 3);
    for scale in bpm::SCALES {
        for rdb in 0..bpm::RDBS_PER_GRDB {
            for l in 0..bpm::LAYERS_PER_RDB {
                layer(
                    &mut t,
                    &format!("bpm.scale{scale}.rdb{rdb}.layer{l}"),
                    g,
                    f + g * l,
                    3,
                );
            }
            layer(
                &mut t,
                &format!("bpm.scale{scale}.rdb{rdb}.fuse"),
                f,
                f + g * bpm::LAYERS_PER_RDB,
                1,
            );
        }
        layer(
            &mut t,
            &format!("bpm.scale{scale}.fuse"),
            f,
            f * bpm::RDBS_PER_GRDB,
            1,
        );
    }
    layer(&mut t, "bpm.nonlocal.theta", f / 2, f, 1);
    layer(&mut t, "bpm.nonlocal.phi", f / 2, f, 1);
    layer(&mut t, "bpm.nonlocal.g", f / 2, f, 1);
    layer(&mut t, "bpm.nonlocal.out", f, f / 2, 1);
    layer(&mut t, "bpm.fusion", f, f * bpm::SCALES.len(), 1);
    layer(&mut t, "bpm.tail", 3, f, 3);
    t
}

/// Deterministic toy weights: walk [`parameter_table`] in order and fill each
/// weight element by element with `(-0.05 + 0.1 * u) as f32`, evaluated in
/// double precision, where `u = (pcg32 >> 8) / 2^24`. Biases are zero and
/// consume no draws.
pub fn toy_init(config: &ModelConfig, seed: u64) -> WeightStore {
    let mut rng = Pcg32::new(seed, TOY_INIT_STREAM);
    let mut store = WeightStore::new();
    for spec in parameter_table(config) {
        let numel: usize = spec.dims.iter().product();
        let data = match spec.kind {
            ParamKind::Bias => vec![0.0; numel],
            ParamKind::Weight => (0..numel)
                .map(|_| (-TOY_INIT_BOUND + 2.0 * TOY_INIT_BOUND * rng.next_unit()) as f32)
                .collect(),
        };
        store
            .insert(spec.name, spec.dims, data)
            .expect("parameter table names are unique");
    }
    store
}
