//! Top-k sparsification and per-coordinate gradient clipping.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{norm_sq, Scalar};

/// Bytes per transmitted entry: a 4-byte index plus an 8-byte value.
pub const ENTRY_BYTES: u64 = 12;
/// Message header: sender, iteration and k.
pub const HEADER_BYTES: u64 = 16;

/// Wire size of a Top-k message with `k` entries.
pub const fn message_bytes(k: usize) -> u64 {
    ENTRY_BYTES * k as u64 + HEADER_BYTES
}

/// A Top-k message: retained coordinates in strictly increasing index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseUpdate<T> {
    dim: usize,
    k: usize,
    indices: Vec<u32>,
    values: Vec<T>,
}

impl<T: Scalar> SparseUpdate<T> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        self.indices.iter().map(|&i| i as usize).zip(self.values.iter().copied())
    }

    pub fn densify(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim];
        for (i, v) in self.entries() {
            out[i] = v;
        }
        out
    }

    /// `target += densify(self)`.
    pub fn add_to(&self, target: &mut [T]) -> Result<()> {
        if target.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: target.len() });
        }
        for (i, v) in self.entries() {
            target[i] += v;
        }
        Ok(())
    }

    pub fn wire_bytes(&self) -> u64 {
        message_bytes(self.len())
    }
}

fn check_k(d: usize, k: usize) -> Result<()> {
    if k == 0 || k > d {
        return Err(Error::domain("k", format!("need 1 <= k <= d, got k = {k}, d = {d}")));
    }
    Ok(())
}

/// Keeps the `k` largest-magnitude coordinates. Ties go to the lower index.
pub fn top_k<T: Scalar>(x: &[T], k: usize) -> Result<SparseUpdate<T>> {
    let d = x.len();
    check_k(d, k)?;
    let mut order: Vec<u32> = (0..d as u32).collect();
    // Strict total order: larger magnitude first, then lower index.
    let rank = |a: &u32, b: &u32| {
        let (ma, mb) = (x[*a as usize].abs(), x[*b as usize].abs());
        mb.partial_cmp(&ma).unwrap_or(Ordering::Equal).then(a.cmp(b))
    };
    if k < d {
        order.select_nth_unstable_by(k - 1, rank);
        order.truncate(k);
    }
    order.sort_unstable();
    let values = order.iter().map(|&i| x[i as usize]).collect();
    Ok(SparseUpdate { dim: d, k, indices: order, values })
}

/// Compression error of Top-k alongside its worst-case bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionGap<T> {
    /// `||S(x) - x||^2`
    pub gap: T,
    /// `(1 - k/d) ||x||^2`
    pub bound: T,
}

pub fn contraction_gap<T: Scalar>(x: &[T], k: usize) -> Result<ContractionGap<T>> {
    let s = top_k(x, k)?;
    let mut kept = vec![false; x.len()];
    for &i in s.indices() {
        kept[i as usize] = true;
    }
    let gap = x
        .iter()
        .zip(&kept)
        .filter(|(_, &keep)| !keep)
        .map(|(&v, _)| v * v)
        .sum();
    let d = T::of(x.len() as f64);
    let bound = (T::one() - T::of(k as f64) / d) * norm_sq(x);
    Ok(ContractionGap { gap, bound })
}

/// Clamps every coordinate into `[-G/sqrt(d), G/sqrt(d)]`.
pub fn clip_per_coordinate<T: Scalar>(g: &[T], scale: T) -> Result<Vec<T>> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, scale)?;
    Ok(out)
}

/// In-place variant of [`clip_per_coordinate`]; returns how many coordinates
/// were clamped.
pub fn clip_in_place<T: Scalar>(g: &mut [T], scale: T) -> Result<usize> {
    if !(scale > T::zero()) {
        return Err(Error::domain("G", format!("clipping scale must be positive, got {scale}")));
    }
    if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(pos));
    }
    let limit = scale / T::of(g.len() as f64).sqrt();
    let mut clamped = 0;
    for v in g.iter_mut() {
        if *v > limit {
            *v = limit;
            clamped += 1;
        } else if *v < -limit {
            *v = -limit;
            clamped += 1;
        }
    }
    Ok(clamped)
}
