//! Fusion of a motion template back into the frame features it was computed
//! from. Micro and adaptive fusion pair template map `k` with frame
//! `k + center_offset` and drop unpaired frames; global fusion pools the
//! template over time and adds the same term to every frame.

use crate::error::{Error, Result};
use crate::model::block::{conv_block, BlockVars, ConvVars};
use crate::model::params::{BoundParams, FusionParams};
use crate::templates::MotionTemplate;
use crate::tensor::{ReduceMode, Tape, Var};

/// Tape handles for one extractor's parameters.
#[derive(Clone, Copy, Debug)]
pub enum FusionVars {
    Micro { w: Var },
    Global { w: Var, mix: ConvVars },
    Adaptive { template_block: BlockVars },
}

impl FusionParams {
    pub fn vars(&self, bound: &BoundParams) -> FusionVars {
        match self {
            FusionParams::Micro { w } => FusionVars::Micro { w: bound.var(*w) },
            FusionParams::Global { w, mix } => FusionVars::Global {
                w: bound.var(*w),
                mix: mix.vars(bound),
            },
            FusionParams::Adaptive { template_block } => FusionVars::Adaptive {
                template_block: template_block.vars(bound),
            },
        }
    }
}

/// Checks that `t` was derived from `f` and returns the frames it pairs with.
fn paired_frames(tape: &mut Tape, f: Var, t: &MotionTemplate) -> Result<Var> {
    let fs = tape.shape(f).to_vec();
    let ts = tape.shape(t.maps).to_vec();
    if fs.len() != 4 || ts.len() != 4 || fs[1..] != ts[1..] {
        return Err(Error::Alignment(format!(
            "template maps {ts:?} do not match feature sequence {fs:?}"
        )));
    }
    let n = fs[0];
    if n < t.kind.min_frames()
        || ts[0] != t.kind.output_len(n)
        || t.center_offset != t.kind.center_offset()
    {
        return Err(Error::Alignment(format!(
            "{} template with {} maps at offset {} cannot come from {n} frames",
            t.kind, ts[0], t.center_offset
        )));
    }
    tape.narrow(f, t.center_offset, ts[0])
}

/// `out[k] = F[k + center_offset] + w · T[k]`.
pub fn fuse_micro(tape: &mut Tape, f: Var, t: &MotionTemplate, w: Var) -> Result<Var> {
    let frames = paired_frames(tape, f, t)?;
    let motion = tape.scale_var(t.maps, w)?;
    tape.add(frames, motion)
}

/// `out[k] = F[k] + w · mix(cat(mean_k T, max_k T))` for every frame.
pub fn fuse_global(
    tape: &mut Tape,
    f: Var,
    t: &MotionTemplate,
    w: Var,
    mix: &ConvVars,
) -> Result<Var> {
    paired_frames(tape, f, t)?;
    let mean = tape.reduce(t.maps, 0, ReduceMode::Mean)?;
    let max = tape.reduce(t.maps, 0, ReduceMode::Max)?;
    let pooled = tape.concat(&[mean, max])?;
    let g = tape.conv2d(pooled, mix.weight, mix.bias, 1, 0)?;
    let motion = tape.scale_var(g, w)?;
    tape.add(f, motion)
}

/// `out[k] = CB(F[k + center_offset]) + CB_T(T[k])`; the two blocks do not
/// share weights.
pub fn fuse_adaptive(
    tape: &mut Tape,
    f: Var,
    t: &MotionTemplate,
    cb: &BlockVars,
    template_block: &BlockVars,
    slope: f64,
) -> Result<Var> {
    let frames = paired_frames(tape, f, t)?;
    let appearance = conv_block(tape, cb, frames, slope)?;
    let motion = conv_block(tape, template_block, t.maps, slope)?;
    tape.add(appearance, motion)
}

/// Runs a stage's extractor and conv block. Micro and global fusion feed the
/// conv block; adaptive fusion contains it.
pub fn extract_and_block(
    tape: &mut Tape,
    f: Var,
    t: &MotionTemplate,
    fusion: &FusionVars,
    cb: &BlockVars,
    slope: f64,
) -> Result<Var> {
    match fusion {
        FusionVars::Micro { w } => {
            let fused = fuse_micro(tape, f, t, *w)?;
            conv_block(tape, cb, fused, slope)
        }
        FusionVars::Global { w, mix } => {
            let fused = fuse_global(tape, f, t, *w, mix)?;
            conv_block(tape, cb, fused, slope)
        }
        FusionVars::Adaptive { template_block } => {
            fuse_adaptive(tape, f, t, cb, template_block, slope)
        }
    }
}
