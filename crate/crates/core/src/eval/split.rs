//! Stratified label subsets for the semi-supervised protocol.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::labels_of;
use crate::dataset::VideoRecord;
use crate::error::{Error, Result};
use crate::rng;

/// Per-class sample size: `max(1, round_half_even(fraction · count))`.
pub fn per_class_count(fraction: f64, count: usize) -> usize {
    ((fraction * count as f64).round_ties_even() as usize).clamp(1, count)
}

/// Indices (ascending) of the selected videos.
///
/// Each class is shuffled once by a stream keyed on `(seed, class)` and the
/// leading prefix is kept, so for a fixed seed smaller fractions always
/// select subsets of larger ones.
pub fn semi_split_indices(videos: &[VideoRecord], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} must be in (0, 1]")));
    }
    let labels = labels_of(videos)?;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: BTreeMap<usize, Vec<usize>> = (0..num_classes).map(|c| (c, Vec::new())).collect();
    for (i, &l) in labels.iter().enumerate() {
        by_class.get_mut(&l).expect("label in range").push(i);
    }
    let mut chosen = Vec::new();
    for (class, mut members) in by_class {
        if members.is_empty() {
            return Err(Error::InvalidArgument(format!("class {class} has no videos")));
        }
        let n = per_class_count(fraction, members.len());
        let mut r = rng::stream(seed, &[rng::hash_str("semi_split"), class as u64]);
        members.shuffle(&mut r);
        chosen.extend_from_slice(&members[..n]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// The selected videos, in their original order.
pub fn semi_split(videos: &[VideoRecord], fraction: f64, seed: u64) -> Result<Vec<VideoRecord>> {
    Ok(semi_split_indices(videos, fraction, seed)?
        .into_iter()
        .map(|i| videos[i].clone())
        .collect())
}
