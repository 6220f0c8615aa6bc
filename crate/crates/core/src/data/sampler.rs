//! Batch assembly for batch-all triplet training: `p` subjects × `k` segments.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::segment::{sample_segment, MIN_SEQUENCE_LEN};
use super::sequence::LabeledSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub p: usize,
    pub k: usize,
    pub segment_len: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            p: 4,
            k: 4,
            segment_len: 30,
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 || self.segment_len == 0 {
            return Err(Error::Config(format!(
                "batch needs p >= 2, k >= 2 and a positive segment length, got ({}, {}) x {}",
                self.p, self.k, self.segment_len
            )));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.p * self.k
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub labels: Vec<u32>,
    /// `[segment_len, H, W]` each.
    pub segments: Vec<Tensor>,
}

pub struct BatchSampler {
    sequences: Vec<LabeledSequence>,
    /// Subject → indices of its usable sequences.
    by_subject: BTreeMap<u32, Vec<usize>>,
    spec: BatchSpec,
    seed: u64,
}

impl BatchSampler {
    pub fn new(sequences: Vec<LabeledSequence>, spec: BatchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut by_subject: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut discarded = 0;
        for (i, s) in sequences.iter().enumerate() {
            if s.seq.len() >= MIN_SEQUENCE_LEN {
                by_subject.entry(s.subject).or_default().push(i);
            } else {
                discarded += 1;
            }
        }
        if discarded > 0 {
            warn!(
                "discarded {discarded} training sequence(s) shorter than {MIN_SEQUENCE_LEN} frames"
            );
        }
        if by_subject.len() < spec.p {
            return Err(Error::Config(format!(
                "batch needs {} subjects but only {} have a usable training sequence",
                spec.p,
                by_subject.len()
            )));
        }
        Ok(BatchSampler {
            sequences,
            by_subject,
            spec,
            seed,
        })
    }

    pub fn spec(&self) -> BatchSpec {
        self.spec
    }

    pub fn subjects(&self) -> Vec<u32> {
        self.by_subject.keys().copied().collect()
    }

    pub fn sequences(&self) -> &[LabeledSequence] {
        &self.sequences
    }

    /// The batch for training step `step`; a pure function of seed and step.
    pub fn batch(&self, step: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        let subjects: Vec<u32> = self.by_subject.keys().copied().collect();
        let chosen: Vec<u32> = subjects
            .choose_multiple(&mut rng, self.spec.p)
            .copied()
            .collect();
        let mut labels = Vec::with_capacity(self.spec.size());
        let mut segments = Vec::with_capacity(self.spec.size());
        for subject in chosen {
            let pool = &self.by_subject[&subject];
            for _ in 0..self.spec.k {
                let seq = &self.sequences[pool[rng.gen_range(0..pool.len())]].seq;
                let idx = sample_segment(seq.len(), self.spec.segment_len, &mut rng)
                    .expect("only usable sequences are pooled");
                labels.push(subject);
                segments.push(seq.gather(&idx));
            }
        }
        Batch { labels, segments }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::layout::Condition;
    use crate::data::sequence::AlignedSequence;

    fn pool(subjects: u32, per: u32, len: usize) -> Vec<LabeledSequence> {
        let mut out = Vec::new();
        for s in 1..=subjects {
            for r in 1..=per {
                let bits = (0..len * 4)
                    .map(|i| ((i as u32 + s + r) % 2) as u8)
                    .collect();
                out.push(LabeledSequence {
                    subject: s,
                    condition: Condition::Nm,
                    run: r,
                    view: 90,
                    seq: AlignedSequence::from_bits(2, 2, bits),
                });
            }
        }
        out
    }

    #[test]
    fn batch_shape_and_subjects() {
        let spec = BatchSpec {
            p: 8,
            k: 6,
            segment_len: 30,
        };
        let s = BatchSampler::new(pool(10, 2, 40), spec, 1).unwrap();
        for step in 0..20 {
            let b = s.batch(step);
            assert_eq!(b.segments.len(), 48);
            let mut distinct = b.labels.clone();
            distinct.dedup();
            assert_eq!(distinct.len(), 8);
            assert!(b.segments.iter().all(|t| t.shape() == [30, 2, 2]));
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let spec = BatchSpec::default();
        let a = BatchSampler::new(pool(6, 3, 20), spec, 9).unwrap();
        let b = BatchSampler::new(pool(6, 3, 20), spec, 9).unwrap();
        for step in 0..10 {
            assert_eq!(a.batch(step).labels, b.batch(step).labels);
            assert_eq!(a.batch(step).segments, b.batch(step).segments);
        }
        let c = BatchSampler::new(pool(6, 3, 20), spec, 10).unwrap();
        assert!((0..10).any(|s| a.batch(s).labels != c.batch(s).labels));
    }

    #[test]
    fn too_few_subjects_is_a_config_error() {
        let spec = BatchSpec::default();
        assert!(matches!(
            BatchSampler::new(pool(3, 2, 20), spec, 0),
            Err(Error::Config(_))
        ));
        // Short sequences do not count.
        let mut seqs = pool(4, 1, 20);
        seqs[0].seq = AlignedSequence::from_bits(2, 2, vec![0; 14 * 4]);
        assert!(BatchSampler::new(seqs, spec, 0).is_err());
    }
}
