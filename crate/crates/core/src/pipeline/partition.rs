//! Seeded batch assignment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchAssignment {
    pub batch_id: usize,
    pub reviewer_label: String,
    pub paper_ids: Vec<String>,
    pub advance_quota: usize,
}

/// round(2n/3), at least 1; a single paper always advances.
pub fn advance_quota(batch_len: usize) -> usize {
    if batch_len <= 1 {
        1
    } else {
        ((2 * batch_len + 1) / 3).max(1)
    }
}

/// Sizes of consecutive slices; a trailing slice of one is folded into the
/// slice before it.
pub fn slice_sizes(n: usize, batch_size: usize) -> Vec<usize> {
    assert!(batch_size >= 2, "batch_size must be at least 2");
    let mut sizes = vec![batch_size; n / batch_size];
    match n % batch_size {
        0 => {}
        1 if !sizes.is_empty() => *sizes.last_mut().unwrap() += 1,
        r => sizes.push(r),
    }
    sizes
}

/// Shuffles with `seed` and cuts into slices. An empty input gives no
/// batches. Panics if `batch_size < 2`.
pub fn shuffled_slices(ids: &[String], batch_size: usize, seed: u64) -> Vec<Vec<String>> {
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::new();
    let mut rest = order.as_slice();
    for size in slice_sizes(ids.len(), batch_size) {
        let (head, tail) = rest.split_at(size);
        out.push(head.to_vec());
        rest = tail;
    }
    out
}

pub fn reviewer_label(batch_id: usize) -> String {
    format!("reviewer-{batch_id}")
}

pub fn partition(paper_ids: &[String], batch_size: usize, seed: u64) -> Vec<BatchAssignment> {
    shuffled_slices(paper_ids, batch_size, seed)
        .into_iter()
        .enumerate()
        .map(|(batch_id, paper_ids)| BatchAssignment {
            batch_id,
            reviewer_label: reviewer_label(batch_id),
            advance_quota: advance_quota(paper_ids.len()),
            paper_ids,
        })
        .collect()
}
