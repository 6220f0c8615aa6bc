//! The training loop.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use log::info;
use rayon::prelude::*;

use super::adam::Adam;
use super::checkpoint::{checkpoint_path, save_checkpoint, Checkpoint};
use super::schedule::LrSchedule;
use super::triplet::{triplet_loss_ba, TripletConfig};
use crate::data::{BatchSampler, BatchSpec};
use crate::error::{Error, Result};
use crate::model::forward::{as_input, scn_forward};
use crate::model::{BoundParams, ModelConfig, ScnParams};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub iterations: u64,
    pub batch: BatchSpec,
    pub triplet: TripletConfig,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Write `ckpt_{step}.scn` every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Stop early, with a final checkpoint, once this much time has passed.
    pub time_limit: Option<Duration>,
    /// Tapes beyond this many bytes are dropped after the forward pass and
    /// recomputed for the backward pass.
    pub tape_budget: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            iterations: 5_000,
            batch: BatchSpec::default(),
            triplet: TripletConfig::default(),
            schedule: LrSchedule::Custom {
                base: 1e-3,
                milestones: Vec::new(),
                gamma: 0.1,
            },
            seed: 0,
            checkpoint_every: 0,
            time_limit: None,
            tape_budget: 1536 << 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub params: ScnParams,
    pub adam: Adam,
}

impl TrainState {
    pub fn fresh(config: &ModelConfig, seed: u64) -> Result<Self> {
        let params = ScnParams::init(config, seed)?;
        let adam = Adam::new(params.tensors());
        Ok(TrainState {
            step: 0,
            params,
            adam,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        let adam = ckpt
            .adam
            .unwrap_or_else(|| Adam::new(ckpt.params.tensors()));
        TrainState {
            step: ckpt.step,
            params: ckpt.params,
            adam,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub nonzero_fraction: f64,
    pub wall_ms: f64,
}

pub enum Control {
    Continue,
    Stop(String),
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub final_step: u64,
    pub stop_reason: Option<String>,
    pub last: Option<StepRecord>,
    pub elapsed: Duration,
}

pub struct BatchGradients {
    pub loss: f64,
    pub nonzero_fraction: f64,
    /// Gradient for every parameter tensor, in parameter order.
    pub grads: Vec<Tensor>,
}

struct Recorded {
    tape: Tape,
    bound: BoundParams,
    out: Var,
}

fn record(params: &ScnParams, segment: &Tensor) -> Result<Recorded> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.constant(as_input(segment)?);
    let out = scn_forward(&mut tape, params, &bound, x)?;
    Ok(Recorded { tape, bound, out })
}

/// Loss, active fraction, and parameter gradients for one labeled batch.
pub fn batch_gradients(
    params: &ScnParams,
    segments: &[Tensor],
    labels: &[u32],
    triplet: &TripletConfig,
    tape_budget: usize,
) -> Result<BatchGradients> {
    let chunk = rayon::current_num_threads().max(1);
    let mut features = Vec::with_capacity(segments.len());
    let mut kept: Vec<Option<Recorded>> = Vec::with_capacity(segments.len());
    let mut used = 0usize;
    for group in segments.chunks(chunk) {
        let recorded: Vec<Result<Recorded>> = group.par_iter().map(|s| record(params, s)).collect();
        for r in recorded {
            let r = r?;
            features.push(r.tape.value(r.out).clone());
            let bytes = r.tape.value_bytes();
            if used + bytes <= tape_budget {
                used += bytes;
                kept.push(Some(r));
            } else {
                kept.push(None);
            }
        }
    }
    let flat: Vec<&[f64]> = features.iter().map(Tensor::data).collect();
    let out = triplet_loss_ba(&flat, labels, triplet)?;

    let jobs: Vec<(usize, Option<Recorded>)> = kept.into_iter().enumerate().collect();
    let per_segment: Vec<Result<Option<Vec<Tensor>>>> = jobs
        .into_par_iter()
        .map(|(i, rec)| {
            let g = &out.grads[i];
            if g.iter().all(|&v| v == 0.0) {
                return Ok(None);
            }
            let rec = match rec {
                Some(r) => r,
                None => record(params, &segments[i])?,
            };
            let seed = Tensor::new(features[i].shape().to_vec(), g.clone())?;
            let mut grads = rec.tape.backward(rec.out, seed)?;
            Ok(Some(
                rec.bound
                    .vars()
                    .iter()
                    .map(|&v| {
                        grads
                            .take(v)
                            .expect("parameter leaves always receive a gradient")
                    })
                    .collect(),
            ))
        })
        .collect();

    let mut total: Vec<Tensor> = params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    for g in per_segment {
        if let Some(g) = g? {
            for (acc, gi) in total.iter_mut().zip(g) {
                acc.data_mut()
                    .iter_mut()
                    .zip(gi.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok(BatchGradients {
        loss: out.loss,
        nonzero_fraction: out.nonzero_fraction,
        grads: total,
    })
}

/// One optimizer step on the batch for `state.step`.
pub fn train_step(
    state: &mut TrainState,
    sampler: &BatchSampler,
    opts: &TrainOptions,
) -> Result<StepRecord> {
    let t0 = Instant::now();
    let batch = sampler.batch(state.step);
    let lr = opts.schedule.lr(state.step);
    let g = batch_gradients(
        &state.params,
        &batch.segments,
        &batch.labels,
        &opts.triplet,
        opts.tape_budget,
    )?;
    if !g.loss.is_finite() {
        return Err(Error::NonFinite {
            index: 0,
            context: format!("loss at step {}", state.step + 1),
        });
    }
    let names = state.params.names().to_vec();
    let mut tensors = state.params.tensors().to_vec();
    state.adam.step(&mut tensors, &g.grads, &names, lr)?;
    let named = names.into_iter().zip(tensors).collect();
    state.params.load_tensors(named)?;
    state.step += 1;
    Ok(StepRecord {
        step: state.step,
        lr,
        loss: g.loss,
        nonzero_fraction: g.nonzero_fraction,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

pub const TRACE_FILE: &str = "trace.csv";
const TRACE_HEADER: &str = "step,lr,loss,nonzero_fraction,wall_ms";

fn open_trace(out_dir: &Path, resume: bool) -> Result<BufWriter<File>> {
    let path = out_dir.join(TRACE_FILE);
    let ctx = || format!("opening {}", path.display());
    let append = resume && path.exists();
    let file = if append {
        OpenOptions::new().append(true).open(&path)
    } else {
        File::create(&path)
    }
    .map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    if !append {
        writeln!(w, "{TRACE_HEADER}").map_err(|e| Error::io(ctx(), e))?;
    }
    Ok(w)
}

/// Trains from `state` until `opts.iterations` completed steps, the time
/// limit, or a stop from `monitor`. Appends to `trace.csv` when resuming.
pub fn train(
    state: &mut TrainState,
    sampler: &BatchSampler,
    opts: &TrainOptions,
    out_dir: &Path,
    monitor: &mut dyn FnMut(&StepRecord, &TrainState) -> Result<Control>,
) -> Result<TrainSummary> {
    opts.batch.validate()?;
    opts.triplet.validate()?;
    opts.schedule.validate()?;
    if sampler.spec() != opts.batch {
        return Err(Error::Config(
            "sampler batch spec differs from training options".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let start = Instant::now();
    let first = state.step;
    let mut trace = open_trace(out_dir, first > 0)?;
    let mut last = None;
    let mut stop_reason = None;
    if first == 0 {
        save_checkpoint(
            &checkpoint_path(out_dir, 0),
            0,
            &state.params,
            Some(&state.adam),
        )?;
    }
    while state.step < opts.iterations {
        let rec = train_step(state, sampler, opts)?;
        writeln!(
            trace,
            "{},{:e},{},{},{:.1}",
            rec.step, rec.lr, rec.loss, rec.nonzero_fraction, rec.wall_ms
        )
        .and_then(|_| trace.flush())
        .map_err(|e| Error::io("writing trace", e))?;
        info!(
            "step {} lr {:e} loss {:.5} nonzero {:.4} ({:.0} ms)",
            rec.step, rec.lr, rec.loss, rec.nonzero_fraction, rec.wall_ms
        );
        last = Some(rec);
        if opts.checkpoint_every > 0 && rec.step % opts.checkpoint_every == 0 {
            save_checkpoint(
                &checkpoint_path(out_dir, rec.step),
                rec.step,
                &state.params,
                Some(&state.adam),
            )?;
        }
        if let Control::Stop(reason) = monitor(&rec, state)? {
            stop_reason = Some(reason);
            break;
        }
        if opts.time_limit.is_some_and(|l| start.elapsed() >= l) {
            stop_reason = Some(format!("time limit reached after {} steps", rec.step));
            break;
        }
    }
    let final_path = checkpoint_path(out_dir, state.step);
    if state.step > 0 && !final_path.exists() {
        save_checkpoint(&final_path, state.step, &state.params, Some(&state.adam))?;
    }
    Ok(TrainSummary {
        steps_run: state.step - first,
        final_step: state.step,
        stop_reason,
        last,
        elapsed: start.elapsed(),
    })
}
