//! End-to-end runs composed from the library pieces: dataset splits,
//! training with periodic evaluation, and template dumps.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::GrayImage;
use log::{info, warn};

use crate::config::{Layout, RunConfig};
use crate::data::{
    load_casia_layout_with, load_oumvlp_layout, load_records, write_gray, BatchSampler,
    DatasetIndex, LabeledSequence, Split,
};
use crate::error::{Error, Result};
use crate::eval::{extract_features, rank1, EvalReport};
use crate::model::{stage_templates, ScnParams};
use crate::tensor::Tensor;
use crate::train::{load_checkpoint, train, Control, TrainState, TrainSummary};

pub const EVAL_TRACE_FILE: &str = "eval_trace.csv";

/// Aligned sequences of the three protocol splits.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<LabeledSequence>,
    pub gallery: Vec<LabeledSequence>,
    pub probe: Vec<LabeledSequence>,
}

pub fn load_index(cfg: &RunConfig) -> Result<DatasetIndex> {
    match cfg.data.layout {
        Layout::Casia => load_casia_layout_with(&cfg.data.root, &cfg.data.protocol()?),
        Layout::Oumvlp => load_oumvlp_layout(&cfg.data.root, cfg.data.train_subjects),
    }
}

/// Indexes the dataset and aligns every sequence to the model's input size.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let index = load_index(cfg)?;
    let (h, w) = (cfg.model.height, cfg.model.width);
    let splits = Splits {
        train: load_records(index.split(Split::Train), h, w)?,
        gallery: load_records(index.split(Split::Gallery), h, w)?,
        probe: load_records(index.split(Split::Probe), h, w)?,
    };
    info!(
        "{}: {} train, {} gallery, {} probe sequences",
        cfg.data.root.display(),
        splits.train.len(),
        splits.gallery.len(),
        splits.probe.len()
    );
    Ok(splits)
}

/// Rank-1 report of the frozen model. With `gallery_as_probe` the gallery is
/// matched against itself.
pub fn evaluate(
    params: &ScnParams,
    splits: &Splits,
    exclude_identical_view: bool,
    gallery_as_probe: bool,
) -> Result<EvalReport> {
    let gallery = extract_features(params, &splits.gallery)?;
    if gallery_as_probe {
        return Ok(rank1(&gallery, &gallery, exclude_identical_view));
    }
    let probe = extract_features(params, &splits.probe)?;
    Ok(rank1(&gallery, &probe, exclude_identical_view))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub summary: TrainSummary,
    /// Evaluation of the final parameters, when the dataset has a test split.
    pub report: Option<EvalReport>,
    /// (step, mean rank-1) of every periodic evaluation.
    pub evals: Vec<(u64, f64)>,
    pub params: ScnParams,
}

fn mean_rank1(report: &EvalReport) -> f64 {
    report.overall_mean().unwrap_or(0.0)
}

fn append_eval_trace(out_dir: &Path, step: u64, report: &EvalReport) -> Result<()> {
    let path = out_dir.join(EVAL_TRACE_FILE);
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut line = String::new();
    if fresh {
        line.push_str("step,mean");
        for c in &report.conditions {
            line.push_str(&format!(",{}", c.condition));
        }
        line.push('\n');
    }
    line.push_str(&format!("{step},{:.4}", mean_rank1(report)));
    for c in &report.conditions {
        line.push_str(&format!(
            ",{:.4}",
            report.mean(c.condition).unwrap_or(f64::NAN)
        ));
    }
    line.push('\n');
    f.write_all(line.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Trains `cfg.model` (or continues from `resume`) on the train split and
/// evaluates on the test split. Every `train.eval_every` steps the model is
/// evaluated; training stops once the mean rank-1 reaches `train.target_rank1`
/// (when positive).
pub fn train_run(
    cfg: &RunConfig,
    splits: &Splits,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let opts = cfg.train.options(cfg.seed)?;
    let mut state = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.params.config != cfg.model {
                return Err(Error::Config(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            info!("resuming from {} at step {}", path.display(), ckpt.step);
            TrainState::from_checkpoint(ckpt)
        }
        None => TrainState::fresh(&cfg.model, cfg.seed)?,
    };
    let sampler = BatchSampler::new(splits.train.clone(), opts.batch, cfg.seed)?;
    let has_test =
        !splits.gallery.is_empty() && (cfg.eval.gallery_as_probe || !splits.probe.is_empty());
    let excl = cfg.eval.exclude_identical_view;
    let target = cfg.train.target_rank1;
    let every = cfg.train.eval_every;
    let mut evals = Vec::new();
    let mut latest: Option<(u64, EvalReport)> = None;
    let mut monitor = |rec: &crate::train::StepRecord, st: &TrainState| -> Result<Control> {
        if every == 0 || !has_test || !rec.step.is_multiple_of(every) {
            return Ok(Control::Continue);
        }
        let t = Instant::now();
        let report = evaluate(&st.params, splits, excl, cfg.eval.gallery_as_probe)?;
        let mean = mean_rank1(&report);
        info!(
            "step {}: mean rank-1 {mean:.2}% ({:.1} s)",
            rec.step,
            t.elapsed().as_secs_f64()
        );
        append_eval_trace(out_dir, rec.step, &report)?;
        evals.push((rec.step, mean));
        latest = Some((rec.step, report));
        if target > 0.0 && mean >= target {
            return Ok(Control::Stop(format!(
                "rank-1 {mean:.2}% reached the target at step {}",
                rec.step
            )));
        }
        Ok(Control::Continue)
    };
    let summary = train(&mut state, &sampler, &opts, out_dir, &mut monitor)?;
    if let Some(reason) = &summary.stop_reason {
        info!("stopped: {reason}");
    }
    let report = if has_test {
        let report = match latest {
            Some((step, report)) if step == state.step => report,
            _ => evaluate(&state.params, splits, excl, cfg.eval.gallery_as_probe)?,
        };
        report.write(&out_dir.join("eval"))?;
        info!("final mean rank-1 {:.2}%", mean_rank1(&report));
        Some(report)
    } else {
        warn!("no gallery/probe sequences; skipping evaluation");
        None
    };
    Ok(TrainOutcome {
        summary,
        report,
        evals,
        params: state.params,
    })
}

/// Tiles the channels of a `[C, H, W]` map into a near-square grid, min-max
/// normalized over the whole map. A constant map is written black.
pub fn template_grid(map: &[f64], channels: usize, height: usize, width: usize) -> GrayImage {
    let cols = (channels as f64).sqrt().ceil().max(1.0) as usize;
    let rows = channels.div_ceil(cols).max(1);
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let mut img = GrayImage::new((cols * width) as u32, (rows * height) as u32);
    for c in 0..channels {
        let (gy, gx) = (c / cols * height, c % cols * width);
        for y in 0..height {
            for x in 0..width {
                let v = map[(c * height + y) * width + x];
                let level = if span > 0.0 {
                    ((v - lo) / span * 255.0).round()
                } else {
                    0.0
                };
                img.put_pixel((gx + x) as u32, (gy + y) as u32, image::Luma([level as u8]));
            }
        }
    }
    img
}

/// Writes `out_dir/stage{S}/t{k}.pgm` for every template map of every stage
/// with an extractor (stages numbered from 1, maps from 0).
pub fn dump_templates(params: &ScnParams, frames: &Tensor, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let templates = stage_templates(params, frames)?;
    if templates.is_empty() {
        return Err(Error::Config(
            "the model has no behavioral extractor; nothing to dump".into(),
        ));
    }
    let mut written = Vec::new();
    for (stage, maps) in templates {
        let dir = out_dir.join(format!("stage{}", stage + 1));
        fs::create_dir_all(&dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let s = maps.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        for k in 0..s[0] {
            let path = dir.join(format!("t{k}.pgm"));
            write_gray(&path, &template_grid(maps.frame(k), c, h, w))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_normalizes_over_the_whole_map() {
        let map: Vec<f64> = (0..5 * 2 * 3).map(|i| i as f64).collect();
        let img = template_grid(&map, 5, 2, 3);
        assert_eq!(img.dimensions(), (9, 4));
        assert_eq!(img.get_pixel(0, 0)[0], 0);
        // Channel 4 sits in row 1, column 1; its last pixel is the maximum.
        assert_eq!(img.get_pixel(5, 3)[0], 255);
        // The unused grid slot stays black.
        assert_eq!(img.get_pixel(8, 3)[0], 0);
    }

    #[test]
    fn constant_map_is_black() {
        let img = template_grid(&[0.7; 12], 3, 2, 2);
        assert!(img.pixels().all(|p| p[0] == 0));
    }
}
