//! Block partitioning and anti-diagonal (wavefront) scheduling.
//!
//! Block `(i, j)` is predicted from `(i-1, j)` and `(i, j-1)`, so every block
//! on the line `i + j = L` only depends on lines `< L`. The executor runs one
//! line at a time and lets the blocks of a line proceed concurrently.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::raster::{quantize_unit, Image};
use crate::tensor::Tensor;

pub const MIN_BLOCK_SIZE: usize = 8;
pub const DEFAULT_WORKERS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockIndex {
    pub row: usize,
    pub col: usize,
}

impl BlockIndex {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for BlockIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGrid {
    pub height: usize,
    pub width: usize,
    pub block: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockGrid {
    pub fn new(height: usize, width: usize, block: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("empty image {width}x{height}")));
        }
        if block < MIN_BLOCK_SIZE {
            return Err(Error::config(format!(
                "block size {block} is below the minimum of {MIN_BLOCK_SIZE}"
            )));
        }
        Ok(Self {
            height,
            width,
            block,
            rows: height.div_ceil(block),
            cols: width.div_ceil(block),
        })
    }

    pub fn padded_height(&self) -> usize {
        self.rows * self.block
    }

    pub fn padded_width(&self) -> usize {
        self.cols * self.block
    }

    pub fn block_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Raster position of a block.
    pub fn raster(&self, index: BlockIndex) -> usize {
        index.row * self.cols + index.col
    }

    pub fn indices(&self) -> impl Iterator<Item = BlockIndex> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.cols).map(move |c| BlockIndex::new(r, c)))
    }

    pub fn upper(&self, index: BlockIndex) -> Option<BlockIndex> {
        (index.row > 0).then(|| BlockIndex::new(index.row - 1, index.col))
    }

    pub fn left(&self, index: BlockIndex) -> Option<BlockIndex> {
        (index.col > 0).then(|| BlockIndex::new(index.row, index.col - 1))
    }
}

pub type BlockMap = BTreeMap<BlockIndex, Tensor>;

/// Splits an image into `3 x B x B` unit-range blocks. The right and bottom
/// edges are padded by replicating the last column/row.
pub fn partition(image: &Image, block: usize) -> Result<(BlockGrid, BlockMap)> {
    let grid = BlockGrid::new(image.height(), image.width(), block)?;
    let mut blocks = BTreeMap::new();
    for index in grid.indices() {
        let y0 = index.row * block;
        let x0 = index.col * block;
        let t = Tensor::from_fn(3, block, block, |c, y, x| {
            let sy = (y0 + y).min(grid.height - 1);
            let sx = (x0 + x).min(grid.width - 1);
            image.pixel(c, sy, sx) as f32 / 255.0
        });
        blocks.insert(index, t);
    }
    Ok((grid, blocks))
}

/// Stitches blocks into a cropped `(3, H, W)` float tensor without clamping.
pub fn assemble_tensor(blocks: &BlockMap, grid: &BlockGrid) -> Result<Tensor> {
    let b = grid.block;
    let mut out = Tensor::zeros(3, grid.height, grid.width);
    for index in grid.indices() {
        let t = blocks.get(&index).ok_or(Error::MissingBlock(index))?;
        if t.dims() != (3, b, b) {
            return Err(Error::shape(format!(
                "block {index} has dims {:?}, expected (3, {b}, {b})",
                t.dims()
            )));
        }
        let y0 = index.row * b;
        let x0 = index.col * b;
        let rows = b.min(grid.height - y0);
        let cols = b.min(grid.width - x0);
        for c in 0..3 {
            for y in 0..rows {
                for x in 0..cols {
                    out.set(c, y0 + y, x0 + x, t.get(c, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Crops, clamps to `[0, 1]` and quantizes to 8 bits.
pub fn assemble(blocks: &BlockMap, grid: &BlockGrid) -> Result<Image> {
    let t = assemble_tensor(blocks, grid)?;
    Ok(Image::from_fn(grid.width, grid.height, |c, y, x| {
        quantize_unit(t.get(c, y, x))
    }))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WavefrontPlan {
    pub rows: usize,
    pub cols: usize,
    pub sets: Vec<Vec<BlockIndex>>,
}

impl WavefrontPlan {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Sequential steps needed with unit-cost tasks and `workers` workers.
    pub fn makespan(&self, workers: usize) -> usize {
        let workers = workers.max(1);
        self.sets.iter().map(|s| s.len().div_ceil(workers)).sum()
    }
}

/// `S_L = {(i, L - i) | 0 <= i < rows, 0 <= L - i < cols}` for
/// `L = 0 ..= rows + cols - 2`.
pub fn wavefront_sets(rows: usize, cols: usize) -> Result<WavefrontPlan> {
    if rows == 0 || cols == 0 {
        return Err(Error::shape(format!(
            "wavefront over an empty {rows}x{cols} grid"
        )));
    }
    let sets = (0..rows + cols - 1)
        .map(|line| {
            let lo = line.saturating_sub(cols - 1);
            let hi = line.min(rows - 1);
            (lo..=hi).map(|i| BlockIndex::new(i, line - i)).collect()
        })
        .collect();
    Ok(WavefrontPlan { rows, cols, sets })
}

/// Read-only view of the blocks finished by earlier wavefront lines.
pub struct Completed<'a, T> {
    cols: usize,
    slots: &'a [Option<T>],
}

impl<'a, T> Completed<'a, T> {
    pub fn get(&self, index: BlockIndex) -> Option<&'a T> {
        if index.col >= self.cols {
            return None;
        }
        self.slots.get(index.row * self.cols + index.col)?.as_ref()
    }

    pub fn upper(&self, index: BlockIndex) -> Option<&'a T> {
        if index.row == 0 {
            return None;
        }
        self.get(BlockIndex::new(index.row - 1, index.col))
    }

    pub fn left(&self, index: BlockIndex) -> Option<&'a T> {
        if index.col == 0 {
            return None;
        }
        self.get(BlockIndex::new(index.row, index.col - 1))
    }
}

/// Applies `f` to every item on up to `workers` threads. Results keep the
/// input order; on failure the error of the earliest failing item is returned.
pub fn parallel_map<I, T, F>(items: &[I], workers: usize, f: F) -> Result<Vec<T>, (usize, Error)>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> Result<T> + Sync,
{
    let threads = workers.max(1).min(items.len());
    if threads <= 1 {
        return items
            .iter()
            .enumerate()
            .map(|(i, item)| f(item).map_err(|e| (i, e)))
            .collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.expect("every item was processed").map_err(|e| (i, e)))
        .collect()
}

/// Runs `task` over every block, line by line. A line starts only after the
/// previous one has finished; the task sees every block completed so far.
/// Returns the results in raster order.
pub fn run_wavefront<T, F>(plan: &WavefrontPlan, workers: usize, task: F) -> Result<Vec<T>>
where
    T: Send + Sync,
    F: Fn(BlockIndex, &Completed<'_, T>) -> Result<T> + Sync,
{
    if workers == 0 {
        return Err(Error::config("worker count must be at least 1"));
    }
    let mut slots: Vec<Option<T>> = (0..plan.rows * plan.cols).map(|_| None).collect();
    for set in &plan.sets {
        let outputs = {
            let done = Completed {
                cols: plan.cols,
                slots: &slots,
            };
            parallel_map(set, workers, |&index| task(index, &done)).map_err(|(i, e)| match e {
                Error::Block { .. } => e,
                other => other.at_block(set[i]),
            })?
        };
        for (index, out) in set.iter().zip(outputs) {
            slots[index.row * plan.cols + index.col] = Some(out);
        }
    }
    Ok(slots
        .into_iter()
        .map(|s| s.expect("wavefront covers the grid"))
        .collect())
}
