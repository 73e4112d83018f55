//! Blocked multi-worker inclusive prefix sum along the leading axis.
//!
//! The buffer is viewed as `rows x width`. Rows are split into one block per
//! worker; each block is scanned locally, block totals are carried forward
//! sequentially, and the carries are added back in parallel.

use std::ops::AddAssign;
use std::thread;

/// Below this many elements the scan runs on the calling thread.
pub const PARALLEL_THRESHOLD: usize = 1 << 14;

pub fn cumsum_rows<T>(data: &mut [T], width: usize, workers: usize)
where
    T: Copy + Send + Sync + AddAssign,
{
    cumsum_rows_with_threshold(data, width, workers, PARALLEL_THRESHOLD);
}

pub fn cumsum_rows_with_threshold<T>(data: &mut [T], width: usize, workers: usize, threshold: usize)
where
    T: Copy + Send + Sync + AddAssign,
{
    if width == 0 || data.is_empty() {
        return;
    }
    let rows = data.len() / width;
    let workers = workers.clamp(1, rows);
    if workers == 1 || data.len() < threshold {
        sequential(data, width);
        return;
    }

    let rows_per_block = rows.div_ceil(workers);
    let block_len = rows_per_block * width;

    thread::scope(|s| {
        for block in data.chunks_mut(block_len) {
            s.spawn(move || sequential(block, width));
        }
    });

    // carry[b] = sum of the totals of blocks 0..b
    let blocks = data.len().div_ceil(block_len);
    let mut carries: Vec<Vec<T>> = Vec::with_capacity(blocks);
    let mut running: Option<Vec<T>> = None;
    for b in 0..blocks {
        if let Some(r) = &running {
            carries.push(r.clone());
        } else {
            carries.push(Vec::new());
        }
        let end = ((b + 1) * block_len).min(data.len());
        let last = &data[end - width..end];
        match &mut running {
            None => running = Some(last.to_vec()),
            Some(r) => r.iter_mut().zip(last).for_each(|(acc, &v)| *acc += v),
        }
    }

    thread::scope(|s| {
        for (block, carry) in data.chunks_mut(block_len).zip(carries.iter()).skip(1) {
            s.spawn(move || {
                for row in block.chunks_mut(width) {
                    row.iter_mut().zip(carry).for_each(|(x, &c)| *x += c);
                }
            });
        }
    });
}

fn sequential<T: Copy + AddAssign>(data: &mut [T], width: usize) {
    let rows = data.len() / width;
    for r in 1..rows {
        let (done, rest) = data.split_at_mut(r * width);
        let prev = &done[(r - 1) * width..];
        rest[..width].iter_mut().zip(prev).for_each(|(x, &p)| *x += p);
    }
}

/// Inclusive suffix sum: the adjoint of [`cumsum_rows`].
pub fn reverse_cumsum_rows<T>(data: &mut [T], width: usize, workers: usize)
where
    T: Copy + Send + Sync + AddAssign,
{
    if width == 0 || data.is_empty() {
        return;
    }
    reverse_rows(data, width);
    cumsum_rows(data, width, workers);
    reverse_rows(data, width);
}

fn reverse_rows<T>(data: &mut [T], width: usize) {
    let rows = data.len() / width;
    for r in 0..rows / 2 {
        let (head, tail) = data.split_at_mut((rows - 1 - r) * width);
        head[r * width..(r + 1) * width].swap_with_slice(&mut tail[..width]);
    }
}
