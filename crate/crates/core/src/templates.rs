//! Motion templates computed from a per-frame feature sequence `[n, C, H, W]`.
//!
//! Every template is a stack of non-negative maps built from absolute
//! differences. `center_offset` records which source frame `maps[0]`
//! describes, so fusion can align the template with the frames it modifies:
//!
//! | kind          | maps      | center_offset |
//! |---------------|-----------|---------------|
//! | `Diff`        | `n - 1`   | 0             |
//! | `MultiDiff`   | `n - 2`   | 1             |
//! | `StaticExcl`  | `n`       | 0             |

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{ReduceMode, Tape, Tensor, Var};

/// Filter that estimates the static component of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StaticFilter {
    Mean,
    Median,
}

impl From<StaticFilter> for ReduceMode {
    fn from(f: StaticFilter) -> Self {
        match f {
            StaticFilter::Mean => ReduceMode::Mean,
            StaticFilter::Median => ReduceMode::Median,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemplateKind {
    /// Adjacent-frame difference.
    Diff,
    /// Sum of the two adjacent differences around a frame.
    MultiDiff,
    /// Deviation of each frame from the sequence's static component.
    StaticExcl(StaticFilter),
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 4] = [
        TemplateKind::Diff,
        TemplateKind::MultiDiff,
        TemplateKind::StaticExcl(StaticFilter::Mean),
        TemplateKind::StaticExcl(StaticFilter::Median),
    ];

    /// Minimum sequence length the template is defined for.
    pub fn min_frames(self) -> usize {
        match self {
            TemplateKind::Diff => 2,
            TemplateKind::MultiDiff => 3,
            TemplateKind::StaticExcl(_) => 1,
        }
    }

    /// Number of maps produced from `n` frames.
    pub fn output_len(self, n: usize) -> usize {
        match self {
            TemplateKind::Diff => n - 1,
            TemplateKind::MultiDiff => n - 2,
            TemplateKind::StaticExcl(_) => n,
        }
    }

    pub fn center_offset(self) -> usize {
        match self {
            TemplateKind::MultiDiff => 1,
            _ => 0,
        }
    }

    /// Short label used in ablation tables (T1, T2, T3).
    pub fn table_label(self) -> &'static str {
        match self {
            TemplateKind::Diff => "T1",
            TemplateKind::MultiDiff => "T2",
            TemplateKind::StaticExcl(_) => "T3",
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateKind::Diff => "diff",
            TemplateKind::MultiDiff => "multi_diff",
            TemplateKind::StaticExcl(StaticFilter::Mean) => "static_excl_mean",
            TemplateKind::StaticExcl(StaticFilter::Median) => "static_excl_median",
        })
    }
}

impl FromStr for TemplateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diff" => Ok(TemplateKind::Diff),
            "multi_diff" => Ok(TemplateKind::MultiDiff),
            "static_excl_mean" => Ok(TemplateKind::StaticExcl(StaticFilter::Mean)),
            "static_excl_median" => Ok(TemplateKind::StaticExcl(StaticFilter::Median)),
            other => Err(Error::Config(format!(
                "unknown template `{other}` (expected diff, multi_diff, static_excl_mean, static_excl_median or none)"
            ))),
        }
    }
}

/// A motion template. On a tape `maps` is a [`Var`]; [`evaluate`] returns
/// the tape-free form with a [`Tensor`].
#[derive(Clone, Debug)]
pub struct MotionTemplate<M = Var> {
    pub kind: TemplateKind,
    /// `[m, C, H, W]`
    pub maps: M,
    pub center_offset: usize,
}

fn frame_count(tape: &Tape, features: Var) -> Result<usize> {
    let s = tape.shape(features);
    if s.len() != 4 {
        return Err(Error::dim(
            0,
            format!("feature sequence must be [n,C,H,W], got {s:?}"),
        ));
    }
    Ok(s[0])
}

fn require(kind: TemplateKind, n: usize) -> Result<()> {
    if n < kind.min_frames() {
        return Err(Error::SequenceTooShort {
            what: format!("{kind} template"),
            needed: kind.min_frames(),
            got: n,
        });
    }
    Ok(())
}

/// `maps[k] = |F[k+1] - F[k]|` for `k = 0..n-1`.
pub fn template_diff(tape: &mut Tape, features: Var) -> Result<MotionTemplate> {
    let n = frame_count(tape, features)?;
    require(TemplateKind::Diff, n)?;
    let later = tape.narrow(features, 1, n - 1)?;
    let earlier = tape.narrow(features, 0, n - 1)?;
    let delta = tape.sub(later, earlier)?;
    Ok(MotionTemplate {
        kind: TemplateKind::Diff,
        maps: tape.abs(delta),
        center_offset: 0,
    })
}

/// `maps[k] = |F[k+2] - F[k+1]| + |F[k+1] - F[k]|` for `k = 0..n-2`.
pub fn template_multi_diff(tape: &mut Tape, features: Var) -> Result<MotionTemplate> {
    let n = frame_count(tape, features)?;
    require(TemplateKind::MultiDiff, n)?;
    let diff = template_diff(tape, features)?.maps;
    let ahead = tape.narrow(diff, 1, n - 2)?;
    let behind = tape.narrow(diff, 0, n - 2)?;
    Ok(MotionTemplate {
        kind: TemplateKind::MultiDiff,
        maps: tape.add(ahead, behind)?,
        center_offset: 1,
    })
}

/// `maps[k] = |F[k] - filter(F)|` where the filter runs over the frame axis.
pub fn template_static_excl(
    tape: &mut Tape,
    features: Var,
    filter: StaticFilter,
) -> Result<MotionTemplate> {
    let n = frame_count(tape, features)?;
    require(TemplateKind::StaticExcl(filter), n)?;
    let stat = tape.reduce(features, 0, filter.into())?;
    let dynamic = tape.sub(features, stat)?;
    Ok(MotionTemplate {
        kind: TemplateKind::StaticExcl(filter),
        maps: tape.abs(dynamic),
        center_offset: 0,
    })
}

pub fn compute(tape: &mut Tape, kind: TemplateKind, features: Var) -> Result<MotionTemplate> {
    match kind {
        TemplateKind::Diff => template_diff(tape, features),
        TemplateKind::MultiDiff => template_multi_diff(tape, features),
        TemplateKind::StaticExcl(filter) => template_static_excl(tape, features, filter),
    }
}

/// Tape-free evaluation of a template on a `[n, C, H, W]` tensor.
pub fn evaluate(kind: TemplateKind, features: &Tensor) -> Result<MotionTemplate<Tensor>> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let t = compute(&mut tape, kind, f)?;
    Ok(MotionTemplate {
        kind: t.kind,
        maps: tape.into_value(t.maps),
        center_offset: t.center_offset,
    })
}
