use std::io;

use thiserror::Error;

use crate::blocking::BlockIndex;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing parameter `{0}` in weight store")]
    MissingParam(String),

    #[error("weight file format error at byte {offset}: {reason}")]
    WeightFormat { offset: usize, reason: String },

    #[error("container error: {0}")]
    Container(#[from] ContainerError),

    #[error("entropy decoding failed: {0}")]
    Entropy(#[from] EntropyError),

    #[error("block {index}: {source}")]
    Block {
        index: BlockIndex,
        #[source]
        source: Box<Error>,
    },

    #[error("missing block {0}")]
    MissingBlock(BlockIndex),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn at_block(self, index: BlockIndex) -> Self {
        Error::Block {
            index,
            source: Box::new(self),
        }
    }
}

/// Failures while parsing a `.lbhc` bitstream container.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContainerError {
    #[error("bad magic {0:02x?}, expected \"LBHC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u16),
    #[error("crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("truncated container at byte {0}")]
    Truncated(usize),
    #[error("inconsistent container: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EntropyError {
    #[error("range decoder ran past the end of a {0}-byte stream")]
    Truncated(usize),
    #[error("corrupt range-coded stream")]
    Corrupt,
}
