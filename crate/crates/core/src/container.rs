//! `.lbhc` bitstream container.
//!
//! ```text
//! "LBHC" | u16 version | u32 width | u32 height | u16 block | u8 config id
//! | u8 flags | u32 block count                              (22 bytes)
//! per block, raster order: u32 hyper length | hyper bytes | u32 main length | main bytes
//! u32 CRC32 (IEEE) of every preceding byte
//! ```
//!
//! All integers are little-endian. Flag bit 0 asks the decoder to run the
//! postprocessing network.

use crate::error::ContainerError;

pub const CONTAINER_MAGIC: &[u8; 4] = b"LBHC";
pub const CONTAINER_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 22;
pub const FLAG_BPM: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContainerMeta {
    pub width: u32,
    pub height: u32,
    pub block_size: u16,
    pub config_id: u8,
    pub flags: u8,
}

impl ContainerMeta {
    pub fn bpm(&self) -> bool {
        self.flags & FLAG_BPM != 0
    }

    pub fn block_count(&self) -> usize {
        let b = self.block_size.max(1) as usize;
        (self.height as usize).div_ceil(b) * (self.width as usize).div_ceil(b)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlockStreams {
    pub hyper: Vec<u8>,
    pub main: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub meta: ContainerMeta,
    pub blocks: Vec<BlockStreams>,
}

impl Container {
    pub fn new(meta: ContainerMeta, blocks: Vec<BlockStreams>) -> Result<Self, ContainerError> {
        let c = Self { meta, blocks };
        c.check()?;
        Ok(c)
    }

    fn check(&self) -> Result<(), ContainerError> {
        if self.meta.block_size == 0 || self.meta.width == 0 || self.meta.height == 0 {
            return Err(ContainerError::Inconsistent(
                "zero image or block dimension".into(),
            ));
        }
        if self.blocks.len() != self.meta.block_count() {
            return Err(ContainerError::Inconsistent(format!(
                "{} blocks for a grid of {}",
                self.blocks.len(),
                self.meta.block_count()
            )));
        }
        Ok(())
    }

    /// Serialized size in bytes.
    pub fn byte_len(&self) -> usize {
        HEADER_LEN
            + self
                .blocks
                .iter()
                .map(|b| 8 + b.hyper.len() + b.main.len())
                .sum::<usize>()
            + 4
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&self.meta.width.to_le_bytes());
        out.extend_from_slice(&self.meta.height.to_le_bytes());
        out.extend_from_slice(&self.meta.block_size.to_le_bytes());
        out.push(self.meta.config_id);
        out.push(self.meta.flags);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            for stream in [&b.hyper, &b.main] {
                out.extend_from_slice(&(stream.len() as u32).to_le_bytes());
                out.extend_from_slice(stream);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != CONTAINER_MAGIC {
            return Err(ContainerError::BadMagic(magic));
        }
        let version = r.u16()?;
        if version != CONTAINER_VERSION {
            return Err(ContainerError::Version(version));
        }
        // Validate the checksum before trusting any length field.
        if bytes.len() < HEADER_LEN + 4 {
            return Err(ContainerError::Truncated(bytes.len()));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(ContainerError::Crc { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: 6 };
        let meta = ContainerMeta {
            width: r.u32()?,
            height: r.u32()?,
            block_size: r.u16()?,
            config_id: r.u8()?,
            flags: r.u8()?,
        };
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count.min(body.len() / 8));
        for _ in 0..count {
            let hyper = r.stream()?;
            let main = r.stream()?;
            blocks.push(BlockStreams { hyper, main });
        }
        if r.pos != body.len() {
            return Err(ContainerError::Inconsistent(format!(
                "{} unexpected bytes after the last block",
                body.len() - r.pos
            )));
        }
        let c = Self { meta, blocks };
        c.check()?;
        Ok(c)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(ContainerError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn stream(&mut self) -> Result<Vec<u8>, ContainerError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }
}
