//! Discretized Gaussian-mixture probabilities, 16-bit frequency tables and a
//! byte-oriented range coder.
//!
//! Symbols live in `[-128, 127]`. A mixture is box-integrated over
//! `[s - 1/2, s + 1/2)`, with the two end symbols absorbing the tails, then
//! turned into integer frequencies summing to 2^16 with every symbol given at
//! least one count. Encoder and decoder build the same table from the same parameters, so
//! the coder itself only ever sees integers.

use crate::error::EntropyError;

pub const SYMBOL_MIN: i32 = -128;
pub const SYMBOL_MAX: i32 = 127;
pub const ALPHABET: usize = 256;
pub const PRECISION_BITS: u32 = 16;
pub const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;

/// Abramowitz & Stegun 7.1.26, |error| <= 1.5e-7.
pub fn erf(x: f64) -> f64 {
    const P: f64 = 0.3275911;
    const A1: f64 = 0.254829592;
    const A2: f64 = -0.284496736;
    const A3: f64 = 1.421413741;
    const A4: f64 = -1.453152027;
    const A5: f64 = 1.061405429;
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + P * x);
    let poly = ((((A5 * t + A4) * t + A3) * t + A2) * t + A1) * t;
    sign * (1.0 - poly * (-x * x).exp())
}

/// Beyond this many standard deviations the normal CDF is taken as exactly
/// 0 or 1 (the true tail mass is below 1e-15).
pub const TAIL_CUTOFF: f64 = 8.0;

/// Standard normal CDF built on [`erf`], saturated outside
/// `±TAIL_CUTOFF`.
pub fn std_normal_cdf(x: f64) -> f64 {
    if x <= -TAIL_CUTOFF {
        0.0
    } else if x >= TAIL_CUTOFF {
        1.0
    } else {
        0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
    }
}

/// One weighted Gaussian of a mixture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Component {
    pub weight: f32,
    pub mean: f32,
    pub scale: f32,
}

impl Component {
    pub fn new(weight: f32, mean: f32, scale: f32) -> Self {
        Self { weight, mean, scale }
    }

    /// Distribution function at the upper edge of alphabet slot `slot`
    /// (`None` for the edge below slot 0). With `upper` set the upper tail
    /// `1 - F` is returned instead, evaluated as `F` of the mirrored point so
    /// that slots on either side of the mean keep full relative precision.
    #[inline]
    fn edge(&self, slot: Option<usize>, upper: bool) -> f64 {
        let (below, above) = if upper { (1.0, 0.0) } else { (0.0, 1.0) };
        match slot {
            None => below,
            Some(i) if i + 1 == ALPHABET => above,
            Some(i) => {
                let x = (i as i32 + SYMBOL_MIN) as f64 + 0.5;
                let z = (x - self.mean as f64) / self.scale as f64;
                std_normal_cdf(if upper { -z } else { z })
            }
        }
    }

    /// Slots above the mean are measured from the upper tail.
    #[inline]
    fn upper_side(&self, slot: usize) -> bool {
        (slot as i32 + SYMBOL_MIN) as f64 > self.mean as f64
    }
}

/// Probability of `symbol` under the discretized mixture.
pub fn gmm_pmf(components: &[Component], symbol: i32) -> f64 {
    if !(SYMBOL_MIN..=SYMBOL_MAX).contains(&symbol) {
        return 0.0;
    }
    let i = (symbol - SYMBOL_MIN) as usize;
    components
        .iter()
        .map(|c| {
            let upper = c.upper_side(i);
            let lo = c.edge(i.checked_sub(1), upper);
            let hi = c.edge(Some(i), upper);
            c.weight as f64 * if upper { lo - hi } else { hi - lo }
        })
        .sum()
}

/// Discrete pmf over the whole alphabet, negative round-off clipped to zero.
/// Same values as [`gmm_pmf`] symbol by symbol.
pub fn gmm_pmf_table(components: &[Component]) -> [f64; ALPHABET] {
    let mut pmf = [0.0f64; ALPHABET];
    for c in components {
        let w = c.weight as f64;
        // Symbols whose boundaries all sit beyond the cutoff get exactly
        // zero from this component; a two-symbol margin absorbs rounding.
        let reach = TAIL_CUTOFF * c.scale as f64;
        let centre = c.mean as f64 - SYMBOL_MIN as f64;
        let first = (centre - reach - 2.0).floor().clamp(0.0, (ALPHABET - 1) as f64) as usize;
        let last = (centre + reach + 2.0).ceil().clamp(0.0, (ALPHABET - 1) as f64) as usize;
        // Shared edge between consecutive slots on the same side.
        let mut prev: Option<(bool, f64)> = None;
        for (i, p) in pmf.iter_mut().enumerate().take(last + 1).skip(first) {
            let upper = c.upper_side(i);
            let lo = match prev {
                Some((side, v)) if side == upper => v,
                _ => c.edge(i.checked_sub(1), upper),
            };
            let hi = c.edge(Some(i), upper);
            *p += w * if upper { lo - hi } else { hi - lo };
            prev = Some((upper, hi));
        }
    }
    for p in pmf.iter_mut() {
        if !(*p > 0.0) {
            *p = 0.0;
        }
    }
    pmf
}

/// Cumulative frequencies over the alphabet: `cum[0] = 0`, `cum[256] = 65536`,
/// strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cum: [u32; ALPHABET + 1],
}

impl CdfTable {
    /// Builds a table from (possibly unnormalized) symbol weights. Each symbol
    /// gets one guaranteed count; the remaining `65536 - 256` counts are
    /// shared in proportion to the weights by largest remainder, ties going
    /// to the lower symbol.
    pub fn from_weights(weights: &[f64; ALPHABET]) -> Self {
        let total: f64 = weights.iter().sum();
        let uniform = !(total.is_finite() && total > 0.0);
        let spare = (TOTAL_FREQ - ALPHABET as u32) as u64;
        let mut base = [0u64; ALPHABET];
        let mut rem = [0f64; ALPHABET];
        for i in 0..ALPHABET {
            let p = if uniform {
                1.0 / ALPHABET as f64
            } else {
                weights[i] / total
            };
            let scaled = p * spare as f64;
            base[i] = scaled.floor() as u64;
            rem[i] = scaled - base[i] as f64;
        }
        let mut assigned: u64 = base.iter().sum();
        if assigned < spare {
            // Fewer than 256 counts are left over, one per bin at most.
            let extra = (spare - assigned) as usize;
            let mut order: [u8; ALPHABET] = std::array::from_fn(|i| i as u8);
            let by_remainder = |a: &u8, b: &u8| rem[*b as usize].total_cmp(&rem[*a as usize]).then(a.cmp(b));
            if extra < ALPHABET {
                order.select_nth_unstable_by(extra, by_remainder);
            }
            for &i in &order[..extra.min(ALPHABET)] {
                base[i as usize] += 1;
            }
            assigned += extra.min(ALPHABET) as u64;
        }
        // Round-off can only overshoot by a count or two; take from the
        // largest bins.
        while assigned > spare {
            let (i, _) = base
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("non-empty alphabet");
            base[i] -= 1;
            assigned -= 1;
        }
        let mut cum = [0u32; ALPHABET + 1];
        for i in 0..ALPHABET {
            cum[i + 1] = cum[i] + 1 + base[i] as u32;
        }
        debug_assert_eq!(cum[ALPHABET], TOTAL_FREQ);
        Self { cum }
    }

    pub fn uniform() -> Self {
        Self::from_weights(&[1.0; ALPHABET])
    }

    pub fn cumulative(&self) -> &[u32; ALPHABET + 1] {
        &self.cum
    }

    #[inline]
    fn slot(symbol: i32) -> usize {
        (symbol.clamp(SYMBOL_MIN, SYMBOL_MAX) - SYMBOL_MIN) as usize
    }

    #[inline]
    pub fn start(&self, symbol: i32) -> u32 {
        self.cum[Self::slot(symbol)]
    }

    #[inline]
    pub fn freq(&self, symbol: i32) -> u32 {
        let i = Self::slot(symbol);
        self.cum[i + 1] - self.cum[i]
    }

    pub fn probability(&self, symbol: i32) -> f64 {
        self.freq(symbol) as f64 / TOTAL_FREQ as f64
    }

    /// Symbol whose interval contains `target` (`target < 65536`).
    #[inline]
    fn lookup(&self, target: u32) -> i32 {
        // Largest i with cum[i] <= target.
        let i = self.cum.partition_point(|&c| c <= target) - 1;
        i as i32 + SYMBOL_MIN
    }
}

pub fn build_cdf(components: &[Component]) -> CdfTable {
    CdfTable::from_weights(&gmm_pmf_table(components))
}

/// Ideal code length in bits of `symbols` under `tables`.
pub fn estimate_rate<'a>(tables: impl IntoIterator<Item = &'a CdfTable>, symbols: &[i32]) -> f64 {
    tables
        .into_iter()
        .zip(symbols)
        .map(|(t, &s)| symbol_bits(t, s))
        .sum()
}

#[inline]
pub fn symbol_bits(table: &CdfTable, symbol: i32) -> f64 {
    PRECISION_BITS as f64 - (table.freq(symbol) as f64).log2()
}

const TOP: u32 = 1 << 24;

/// Range encoder with a 64-bit low register, a 32-bit range and carry
/// propagation through a cached byte.
#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, table: &CdfTable, symbol: i32) {
        debug_assert!((SYMBOL_MIN..=SYMBOL_MAX).contains(&symbol));
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * table.start(symbol) as u64;
        self.range = r * table.freq(symbol);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self, EntropyError> {
        let mut d = Self {
            bytes,
            pos: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8, EntropyError> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or(EntropyError::Truncated(self.bytes.len()))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<i32, EntropyError> {
        let r = self.range >> PRECISION_BITS;
        let target = self.code / r;
        if target >= TOTAL_FREQ {
            return Err(EntropyError::Corrupt);
        }
        let symbol = table.lookup(target);
        self.code -= r * table.start(symbol);
        self.range = r * table.freq(symbol);
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(symbol)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Encodes `symbols[i]` with `table_for(i)`.
pub fn rc_encode<F>(symbols: &[i32], mut table_for: F) -> Vec<u8>
where
    F: FnMut(usize) -> CdfTable,
{
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        enc.encode(&table_for(i), s);
    }
    enc.finish()
}

/// Decodes `count` symbols. The provider receives the symbols decoded so far,
/// which lets it condition on them.
pub fn rc_decode<F>(bytes: &[u8], mut table_for: F, count: usize) -> Result<Vec<i32>, EntropyError>
where
    F: FnMut(usize, &[i32]) -> CdfTable,
{
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let table = table_for(i, &out);
        out.push(dec.decode(&table)?);
    }
    Ok(out)
}
