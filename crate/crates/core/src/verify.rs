//! Gradient-check suite: every differentiable operation on its own, and the
//! whole network plus triplet loss on a tiny configuration.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{fuse_adaptive, fuse_global, fuse_micro};
use crate::model::block::{conv_block, transition, BlockVars, ConvVars};
use crate::model::forward::{as_input, mfa_forward, scn_forward};
use crate::model::{ModelConfig, ScnParams};
use crate::templates::{self, StaticFilter, TemplateKind};
use crate::tensor::{
    grad_check, GradCheckOptions, GradCheckReport, Probe, ReduceMode, Tape, Tensor, Var,
};
use crate::train::{triplet_loss_ba, TripletConfig};

/// Finite-difference step used throughout.
pub const STEP: f64 = 1e-5;

/// Operations checked one at a time, in table order.
pub const OPS: [&str; 29] = [
    "conv2d",
    "conv2d_strided",
    "conv3d_t3",
    "reduce_mean",
    "reduce_max",
    "reduce_median_odd",
    "reduce_median_even",
    "abs",
    "leaky_relu",
    "add",
    "add_broadcast",
    "sub",
    "scale",
    "scale_var",
    "max_pool2x2",
    "narrow",
    "concat",
    "gather",
    "template_diff",
    "template_multi_diff",
    "template_static_excl_mean",
    "template_static_excl_median",
    "fusion_micro",
    "fusion_global",
    "fusion_adaptive",
    "conv_block",
    "transition",
    "mfa",
    "triplet_loss",
];

/// Multi-layer compositions, held to the end-to-end tolerance: their deeper
/// arithmetic leaves more rounding in the central differences.
pub const COMPOSITES: [&str; 6] = [
    "fusion_micro",
    "fusion_global",
    "fusion_adaptive",
    "conv_block",
    "transition",
    "mfa",
];

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: String,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Inputs away from zero, so abs and leaky-relu kinks are at least 0.05 away.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Checks `build` against every input in turn, with the objective
/// `Σ r ⊙ output` for fixed random weights `r`.
fn check_inputs(
    inputs: &[Tensor],
    seed: u64,
    tol: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut merged: Option<GradCheckReport> = None;
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = build(&mut tape, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        uniform(&mut rng, tape.shape(y), 0.5, 1.5)
    };
    for which in 0..inputs.len() {
        let objective = |x: &Tensor, want: bool| -> Result<Probe> {
            let mut tape = Tape::with_branch_trace();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if i == which {
                        tape.param(x.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect();
            let y = build(&mut tape, &vars)?;
            let value = tape
                .value(y)
                .data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum();
            let grad = if want {
                let mut g = tape.backward(y, weights.clone())?;
                Some(
                    g.take(vars[which])
                        .unwrap_or_else(|| Tensor::zeros(x.shape())),
                )
            } else {
                None
            };
            Ok(Probe {
                value,
                grad,
                signature: tape.branch_signature(),
            })
        };
        let opts = GradCheckOptions {
            h: STEP,
            tol,
            coords: None,
        };
        let r = grad_check(objective, &inputs[which], &opts)?;
        match merged.as_mut() {
            Some(m) => m.merge(&r),
            None => merged = Some(r),
        }
    }
    merged.ok_or_else(|| Error::Config("operation has no inputs".into()))
}

fn conv_vars(vars: &[Var], at: usize) -> ConvVars {
    ConvVars {
        weight: vars[at],
        bias: Some(vars[at + 1]),
    }
}

fn block_vars(vars: &[Var], at: usize, projection: bool) -> BlockVars {
    BlockVars {
        conv1: conv_vars(vars, at),
        conv2: conv_vars(vars, at + 2),
        projection: projection.then(|| ConvVars {
            weight: vars[at + 4],
            bias: None,
        }),
    }
}

fn block_inputs(rng: &mut ChaCha8Rng, c: usize, projection: bool) -> Vec<Tensor> {
    let mut v = vec![
        uniform(rng, &[c, c, 3, 3], -0.5, 0.5),
        uniform(rng, &[c], -0.2, 0.2),
        uniform(rng, &[c, c, 3, 3], -0.5, 0.5),
        uniform(rng, &[c], -0.2, 0.2),
    ];
    if projection {
        v.push(uniform(rng, &[c, c, 1, 1], -0.5, 0.5));
    }
    v
}

/// Gradient check of one named operation.
pub fn check_op(name: &str, seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let seq = |rng: &mut ChaCha8Rng, n: usize| uniform(rng, &[n, 2, 3, 4], -1.0, 1.0);
    match name {
        "conv2d" => {
            let ins = [
                uniform(rng, &[3, 2, 5, 4], -1.0, 1.0),
                uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(rng, &[3], -1.0, 1.0),
            ];
            check_inputs(&ins, seed, tol, |t, v| {
                t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
            })
        }
        "conv2d_strided" => {
            let ins = [
                uniform(rng, &[2, 7, 6], -1.0, 1.0),
                uniform(rng, &[3, 2, 3, 2], -1.0, 1.0),
            ];
            check_inputs(&ins, seed, tol, |t, v| t.conv2d(v[0], v[1], None, 2, 1))
        }
        "conv3d_t3" => {
            let ins = [seq(rng, 4), uniform(rng, &[2, 2, 3, 1, 1], -1.0, 1.0)];
            check_inputs(&ins, seed, tol, |t, v| t.conv3d_t3(v[0], v[1]))
        }
        "reduce_mean" => check_inputs(&[seq(rng, 5)], seed, tol, |t, v| {
            t.reduce(v[0], 0, ReduceMode::Mean)
        }),
        "reduce_max" => check_inputs(&[seq(rng, 5)], seed, tol, |t, v| {
            t.reduce(v[0], 0, ReduceMode::Max)
        }),
        "reduce_median_odd" => check_inputs(&[seq(rng, 5)], seed, tol, |t, v| {
            t.reduce(v[0], 0, ReduceMode::Median)
        }),
        "reduce_median_even" => check_inputs(&[seq(rng, 6)], seed, tol, |t, v| {
            t.reduce(v[0], 0, ReduceMode::Median)
        }),
        "abs" => check_inputs(&[off_zero(rng, &[3, 2, 3, 4])], seed, tol, |t, v| {
            Ok(t.abs(v[0]))
        }),
        "leaky_relu" => check_inputs(&[off_zero(rng, &[3, 2, 3, 4])], seed, tol, |t, v| {
            Ok(t.leaky_relu(v[0], 0.01))
        }),
        "add" => check_inputs(&[seq(rng, 3), seq(rng, 3)], seed, tol, |t, v| {
            t.add(v[0], v[1])
        }),
        "add_broadcast" => {
            let ins = [seq(rng, 3), uniform(rng, &[2, 3, 4], -1.0, 1.0)];
            check_inputs(&ins, seed, tol, |t, v| t.add(v[0], v[1]))
        }
        "sub" => check_inputs(&[seq(rng, 3), seq(rng, 3)], seed, tol, |t, v| {
            t.sub(v[0], v[1])
        }),
        "scale" => check_inputs(&[seq(rng, 3)], seed, tol, |t, v| Ok(t.scale(v[0], -0.7))),
        "scale_var" => {
            let ins = [
                seq(rng, 3),
                Tensor::new(vec![1], vec![0.4]).expect("scalar"),
            ];
            check_inputs(&ins, seed, tol, |t, v| t.scale_var(v[0], v[1]))
        }
        "max_pool2x2" => check_inputs(
            &[uniform(rng, &[2, 2, 4, 6], -1.0, 1.0)],
            seed,
            tol,
            |t, v| t.max_pool2x2(v[0]),
        ),
        "narrow" => check_inputs(&[seq(rng, 5)], seed, tol, |t, v| t.narrow(v[0], 1, 3)),
        "concat" => check_inputs(&[seq(rng, 2), seq(rng, 3)], seed, tol, |t, v| {
            t.concat(&[v[0], v[1], v[0]])
        }),
        "gather" => {
            let x = uniform(rng, &[4, 3], -1.0, 1.0);
            let index = vec![5, 0, 5, 11, 2, 7];
            check_inputs(&[x], seed, tol, move |t, v| {
                t.gather(v[0], index.clone(), &[2, 3])
            })
        }
        "template_diff"
        | "template_multi_diff"
        | "template_static_excl_mean"
        | "template_static_excl_median" => {
            let kind = match name {
                "template_diff" => TemplateKind::Diff,
                "template_multi_diff" => TemplateKind::MultiDiff,
                "template_static_excl_mean" => TemplateKind::StaticExcl(StaticFilter::Mean),
                _ => TemplateKind::StaticExcl(StaticFilter::Median),
            };
            check_inputs(&[seq(rng, 5)], seed, tol, move |t, v| {
                Ok(templates::compute(t, kind, v[0])?.maps)
            })
        }
        "fusion_micro" => {
            let ins = [
                seq(rng, 5),
                Tensor::new(vec![1], vec![0.6]).expect("scalar"),
            ];
            check_inputs(&ins, seed, tol, |t, v| {
                let tm = templates::compute(t, TemplateKind::MultiDiff, v[0])?;
                fuse_micro(t, v[0], &tm, v[1])
            })
        }
        "fusion_global" => {
            let ins = [
                seq(rng, 4),
                Tensor::new(vec![1], vec![0.6]).expect("scalar"),
                uniform(rng, &[2, 4, 1, 1], -1.0, 1.0),
                uniform(rng, &[2], -0.5, 0.5),
            ];
            check_inputs(&ins, seed, tol, |t, v| {
                let tm = templates::compute(t, TemplateKind::Diff, v[0])?;
                fuse_global(t, v[0], &tm, v[1], &conv_vars(v, 2))
            })
        }
        "fusion_adaptive" => {
            let mut ins = vec![seq(rng, 4)];
            ins.extend(block_inputs(rng, 2, false));
            ins.extend(block_inputs(rng, 2, true));
            check_inputs(&ins, seed, tol, |t, v| {
                let tm =
                    templates::compute(t, TemplateKind::StaticExcl(StaticFilter::Median), v[0])?;
                fuse_adaptive(
                    t,
                    v[0],
                    &tm,
                    &block_vars(v, 1, false),
                    &block_vars(v, 5, true),
                    0.01,
                )
            })
        }
        "conv_block" => {
            let mut ins = vec![seq(rng, 2)];
            ins.extend(block_inputs(rng, 2, true));
            check_inputs(&ins, seed, tol, |t, v| {
                conv_block(t, &block_vars(v, 1, true), v[0], 0.01)
            })
        }
        "transition" => {
            let ins = [
                uniform(rng, &[2, 2, 4, 6], -1.0, 1.0),
                uniform(rng, &[3, 2, 3, 3], -0.5, 0.5),
                uniform(rng, &[3], -0.2, 0.2),
            ];
            check_inputs(&ins, seed, tol, |t, v| {
                transition(t, &conv_vars(v, 1), true, v[0], 0.01)
            })
        }
        "mfa" => {
            let ins = [seq(rng, 6), uniform(rng, &[2, 2, 3, 1, 1], -1.0, 1.0)];
            let cfg = ModelConfig::default().mfa;
            let cfg = crate::model::MfaConfig { window: 3, ..cfg };
            check_inputs(&ins, seed, tol, move |t, v| {
                mfa_forward(t, &cfg, Some(v[1]), v[0])
            })
        }
        "triplet_loss" => check_triplet(rng, tol),
        other => Err(Error::Config(format!(
            "unknown gradcheck op `{other}` (expected one of {})",
            OPS.join(", ")
        ))),
    }
}

fn check_triplet(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradCheckReport> {
    let labels = [1, 1, 2, 2, 3, 3];
    let dim = 5;
    let cfg = TripletConfig {
        margin: 0.5,
        ..TripletConfig::default()
    };
    let x = uniform(rng, &[labels.len(), dim], -1.0, 1.0);
    let objective = |x: &Tensor, want: bool| -> Result<Probe> {
        let rows: Vec<&[f64]> = x.data().chunks(dim).collect();
        let out = triplet_loss_ba(&rows, &labels, &cfg)?;
        let grad = want
            .then(|| Tensor::new(x.shape().to_vec(), out.grads.concat()))
            .transpose()?;
        Ok(Probe {
            value: out.loss,
            grad,
            signature: Some(out.active as u64),
        })
    };
    let opts = GradCheckOptions {
        h: STEP,
        tol,
        coords: None,
    };
    grad_check(objective, &x, &opts)
}

/// Configuration of the end-to-end check.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        channels: [4, 8, 16],
        height: 16,
        width: 12,
        ..Default::default()
    }
}

/// Frames per sequence in the end-to-end check.
pub const TINY_FRAMES: usize = 8;

/// Coordinates probed per parameter tensor in the end-to-end check.
const COORDS_PER_TENSOR: usize = 24;

/// Network forward plus batch-all triplet loss over a three-sequence batch
/// (labels 1, 1, 2), differentiated with respect to every parameter tensor.
/// Zero-initialized tensors are randomized first so every path carries
/// gradient.
pub fn check_end_to_end(config: &ModelConfig, seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ScnParams::init(config, seed)?;
    for i in 0..params.len() {
        let t = params.tensor_mut(crate::model::params::ParamId(i));
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let frames: Vec<Tensor> = (0..3)
        .map(|_| {
            as_input(&uniform(
                &mut rng,
                &[TINY_FRAMES, config.height, config.width],
                0.0,
                1.0,
            ))
        })
        .collect::<Result<_>>()?;
    let labels = [1u32, 1, 2];
    let triplet = TripletConfig::default();

    let sizes: Vec<usize> = params.tensors().iter().map(Tensor::len).collect();
    let flat = Tensor::new(
        vec![sizes.iter().sum()],
        params
            .tensors()
            .iter()
            .flat_map(|t| t.data().to_vec())
            .collect(),
    )?;
    let mut coords = Vec::new();
    let mut offset = 0;
    for &n in &sizes {
        if n <= COORDS_PER_TENSOR {
            coords.extend(offset..offset + n);
        } else {
            let mut picked: Vec<usize> =
                rand::seq::index::sample(&mut rng, n, COORDS_PER_TENSOR).into_vec();
            picked.sort_unstable();
            coords.extend(picked.into_iter().map(|i| offset + i));
        }
        offset += n;
    }

    let objective = |x: &Tensor, want: bool| -> Result<Probe> {
        let mut p = params.clone();
        let mut at = 0;
        let named = p
            .names()
            .iter()
            .zip(p.tensors())
            .map(|(name, t)| {
                let data = x.data()[at..at + t.len()].to_vec();
                at += t.len();
                Ok((name.clone(), Tensor::new(t.shape().to_vec(), data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        p.load_tensors(named)?;
        let mut tapes = Vec::new();
        let mut signature = 0u64;
        for f in &frames {
            let mut tape = Tape::with_branch_trace();
            let bound = p.bind(&mut tape, true);
            let input = tape.constant(f.clone());
            let y = scn_forward(&mut tape, &p, &bound, input)?;
            signature = signature.rotate_left(17) ^ tape.branch_signature().unwrap_or(0);
            tapes.push((tape, bound, y));
        }
        let features: Vec<&[f64]> = tapes.iter().map(|(t, _, y)| t.value(*y).data()).collect();
        let out = triplet_loss_ba(&features, &labels, &triplet)?;
        signature = signature.rotate_left(17) ^ out.active as u64;
        let grad = if want {
            let mut total = vec![0.0; x.len()];
            for ((tape, bound, y), g) in tapes.iter().zip(&out.grads) {
                let seed = Tensor::new(tape.shape(*y).to_vec(), g.clone())?;
                let mut grads = tape.backward(*y, seed)?;
                let mut at = 0;
                for &v in bound.vars() {
                    let gv = grads
                        .take(v)
                        .expect("parameter leaves always receive a gradient");
                    total[at..at + gv.len()]
                        .iter_mut()
                        .zip(gv.data())
                        .for_each(|(a, b)| *a += b);
                    at += gv.len();
                }
            }
            Some(Tensor::new(x.shape().to_vec(), total)?)
        } else {
            None
        };
        Ok(Probe {
            value: out.loss,
            grad,
            signature: Some(signature),
        })
    };
    let opts = GradCheckOptions {
        h: STEP,
        tol,
        coords: Some(coords),
    };
    grad_check(objective, &flat, &opts)
}

/// Runs `ops` (every listed operation when empty) and returns one row each.
/// Single operations use `op_tol`, [`COMPOSITES`] use `composite_tol`.
pub fn run_ops(ops: &[&str], seed: u64, op_tol: f64, composite_tol: f64) -> Result<Vec<CheckRow>> {
    let ops: Vec<&str> = if ops.is_empty() {
        OPS.to_vec()
    } else {
        ops.to_vec()
    };
    ops.into_iter()
        .map(|name| {
            let t = Instant::now();
            let tol = if COMPOSITES.contains(&name) {
                composite_tol
            } else {
                op_tol
            };
            let report = check_op(name, seed, tol)?;
            Ok(CheckRow {
                name: name.to_string(),
                report,
                elapsed: t.elapsed(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_at_default_tolerance() {
        for row in run_ops(&[], 0, 1e-6, 1e-4).unwrap() {
            assert!(row.passed(), "{}: {:?}", row.name, row.report);
        }
    }

    #[test]
    fn unknown_op_is_a_config_error() {
        assert!(matches!(
            check_op("softmax", 0, 1e-6),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn end_to_end_passes() {
        let r = check_end_to_end(&tiny_config(), 0, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.checked > 300, "{r:?}");
    }
}
