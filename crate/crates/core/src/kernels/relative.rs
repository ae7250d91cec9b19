//! Relative-offset indexing into position tables.

use crate::error::{Error, Result};

/// `max(-k, min(k, x))`.
pub fn clip(x: i64, k: usize) -> i64 {
    let k = k as i64;
    x.clamp(-k, k)
}

/// Row of a `(2k+1)`-row table holding `w_{clip(j-i, k)}`, for 1-based
/// positions `i` (query) and `j` (key). Row `0` is `w_{-k}`, row `2k` is `w_k`.
pub fn relative_index(i: usize, j: usize, k: usize) -> usize {
    (clip(j as i64 - i as i64, k) + k as i64) as usize
}

/// Table rows for every `(i, j)` of a length-`len` sequence, row-major.
pub fn clipped_index_map(len: usize, k: usize) -> Vec<usize> {
    (0..len)
        .flat_map(|i| (0..len).map(move |j| relative_index(i, j, k)))
        .collect()
}

/// Entry of an unclipped `2n−1` table for every `(i, j)`: `j − i + n − 1`.
pub fn raw_index_map(len: usize, max_len: usize) -> Result<Vec<usize>> {
    if len > max_len {
        return Err(Error::Input(format!(
            "sequence of {len} positions exceeds maximum length {max_len}"
        )));
    }
    Ok((0..len)
        .flat_map(|i| (0..len).map(move |j| j + max_len - 1 - i))
        .collect())
}
