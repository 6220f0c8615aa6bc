//! Whole-sequence feature extraction for the gallery and probe splits.

use log::warn;

use crate::data::{Condition, LabeledSequence};
use crate::error::{Error, Result};
use crate::model::{extract, ScnParams, SequenceFeature};

/// Protocol labels carried alongside a feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Label {
    pub subject: u32,
    pub condition: Condition,
    pub run: u32,
    pub view: u32,
}

impl Label {
    pub fn of(seq: &LabeledSequence) -> Self {
        Label {
            subject: seq.subject,
            condition: seq.condition,
            run: seq.run,
            view: seq.view,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEntry {
    pub label: Label,
    pub feature: SequenceFeature,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedSequence {
    pub label: Label,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTable {
    pub entries: Vec<FeatureEntry>,
    pub skipped: Vec<SkippedSequence>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

/// Runs the frozen model over every full sequence. Sequences too short for the
/// model are recorded in `skipped`; any other failure aborts.
///
/// Sequences are processed one at a time: an inference tape over a long
/// sequence at full width can take a large share of memory.
pub fn extract_features(params: &ScnParams, sequences: &[LabeledSequence]) -> Result<FeatureTable> {
    let mut table = FeatureTable::default();
    for seq in sequences {
        let label = Label::of(seq);
        match extract(params, &seq.seq.to_tensor()) {
            Ok(feature) => table.entries.push(FeatureEntry { label, feature }),
            Err(e @ Error::SequenceTooShort { .. }) => {
                warn!(
                    "skipping subject {} {}-{:02} view {}: {e}",
                    label.subject, label.condition, label.run, label.view
                );
                table.skipped.push(SkippedSequence {
                    label,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(table)
}
