//! Training segment selection.

use rand::Rng;

/// Sequences shorter than this are not used for training.
pub const MIN_SEQUENCE_LEN: usize = 15;

/// Frame indices of a training segment of `target` frames from a sequence of
/// `n` frames: a random contiguous window when the sequence is long enough,
/// otherwise the sequence repeated cyclically. `None` when `n` is below
/// [`MIN_SEQUENCE_LEN`].
pub fn sample_segment<R: Rng + ?Sized>(n: usize, target: usize, rng: &mut R) -> Option<Vec<usize>> {
    if n < MIN_SEQUENCE_LEN {
        return None;
    }
    if n >= target {
        let start = rng.gen_range(0..=n - target);
        Some((start..start + target).collect())
    } else {
        Some((0..target).map(|i| i % n).collect())
    }
}
