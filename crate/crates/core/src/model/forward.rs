//! Full network forward map: three stages followed by multi-frame aggregation.

use super::block::{conv_block, transition};
use super::config::{MfaConfig, ModelConfig};
use super::params::{BoundParams, ScnParams};
use crate::error::{Error, Result};
use crate::fusion::extract_and_block;
use crate::templates;
use crate::tensor::{Tape, Tensor, Var};

/// Sequence-level feature map `[C, H, W]`, compared as a flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFeature {
    pub map: Tensor,
}

impl SequenceFeature {
    pub fn flat(&self) -> &[f64] {
        self.map.data()
    }

    /// Euclidean distance between flattened maps.
    pub fn distance(&self, other: &SequenceFeature) -> f64 {
        euclidean(self.flat(), other.flat())
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Number of aggregation windows over `n` frames: `n` with the cyclic
/// extension, `n - L + 1` without.
pub fn num_windows(n: usize, window: usize, cyclic: bool) -> usize {
    if cyclic {
        n
    } else {
        n + 1 - window
    }
}

/// Frames `[s, s+1, ..., s+n-1]` taken cyclically.
fn rotate(tape: &mut Tape, x: Var, s: usize) -> Result<Var> {
    let n = tape.shape(x)[0];
    let s = s % n;
    if s == 0 {
        return Ok(x);
    }
    let head = tape.narrow(x, s, n - s)?;
    let tail = tape.narrow(x, 0, s)?;
    tape.concat(&[head, tail])
}

/// Temporal tap `d` of a `[C_out, C, 3, 1, 1]` kernel as a `[C_out, C, 1, 1]` kernel.
fn kernel_tap(tape: &mut Tape, kernel: Var, d: usize) -> Result<Var> {
    let &[c_out, c, 3, 1, 1] = tape.shape(kernel) else {
        return Err(Error::dim(
            0,
            format!(
                "temporal kernel must be [C_out,C,3,1,1], got {:?}",
                tape.shape(kernel)
            ),
        ));
    };
    let index = (0..c_out * c).map(|oc| oc * 3 + d).collect();
    tape.gather(kernel, index, &[c_out, c, 1, 1])
}

/// Multi-frame aggregation of `[n, C, H, W]` into `[C, H, W]`.
///
/// The sequence is extended cyclically by its first `L - 1` frames. Window
/// `j` covers frames `j..j+L`; it is convolved over time with zero padding at
/// its own borders and reduced by `within`. The `n` window results are
/// reduced by `final_reduce`. Disabled aggregation reduces the frames
/// directly by `final_reduce`.
pub fn mfa_forward(tape: &mut Tape, cfg: &MfaConfig, kernel: Option<Var>, f: Var) -> Result<Var> {
    let Some(kernel) = kernel.filter(|_| cfg.enabled) else {
        return tape.reduce(f, 0, cfg.final_reduce);
    };
    let shape = tape.shape(f).to_vec();
    let (n, l) = (shape[0], cfg.window);
    if l < 3 || n < l {
        return Err(Error::Window { n, window: l });
    }
    // Per-frame tap responses; frame i of window j is
    // K0·F[j+i-1] + K1·F[j+i] + K2·F[j+i+1], with the outer taps dropped at
    // the window borders.
    let mut taps = Vec::with_capacity(3);
    for d in 0..3 {
        let k = kernel_tap(tape, kernel, d)?;
        taps.push(tape.conv2d(f, k, None, 1, 0)?);
    }
    let mut rows = Vec::with_capacity(l);
    for i in 0..l {
        let mut y = rotate(tape, taps[1], i)?;
        if i > 0 {
            let prev = rotate(tape, taps[0], i - 1)?;
            y = tape.add(y, prev)?;
        }
        if i + 1 < l {
            let next = rotate(tape, taps[2], i + 1)?;
            y = tape.add(y, next)?;
        }
        rows.push(y);
    }
    let stacked = tape.concat(&rows)?;
    let mut split = vec![l];
    split.extend_from_slice(&shape);
    let stacked = tape.reshape(stacked, &split)?;
    let per_window = tape.reduce(stacked, 0, cfg.within)?;
    tape.reduce(per_window, 0, cfg.final_reduce)
}

/// Records the network on `tape` for an aligned sequence `[n, 1, H, W]` and
/// returns the `[C, H/4, W/4]` sequence feature.
pub fn scn_forward(
    tape: &mut Tape,
    params: &ScnParams,
    bound: &BoundParams,
    input: Var,
) -> Result<Var> {
    forward_observed(tape, params, bound, input, &mut |_, _| {})
}

/// [`scn_forward`] that also hands every stage's motion template (0-based
/// stage, maps) to `observe`.
pub fn forward_observed(
    tape: &mut Tape,
    params: &ScnParams,
    bound: &BoundParams,
    input: Var,
    observe: &mut dyn FnMut(usize, Var),
) -> Result<Var> {
    let cfg = &params.config;
    let s = tape.shape(input).to_vec();
    if s.len() != 4 || s[1] != 1 || s[2] != cfg.height || s[3] != cfg.width {
        return Err(Error::dim(
            0,
            format!(
                "input must be [n,1,{},{}], got {s:?}",
                cfg.height, cfg.width
            ),
        ));
    }
    check_length(cfg, s[0])?;

    let mut x = input;
    for (stage, sp) in params.stages.iter().enumerate() {
        x = transition(tape, &sp.transition.vars(bound), sp.pool, x, cfg.slope)?;
        let cb = sp.cb.vars(bound);
        x = match (cfg.bie.enabled_at(stage), &sp.bie) {
            (Some(kind), Some(fp)) => {
                let t = templates::compute(tape, kind, x)?;
                observe(stage, t.maps);
                extract_and_block(tape, x, &t, &fp.vars(bound), &cb, cfg.slope)?
            }
            _ => conv_block(tape, &cb, x, cfg.slope)?,
        };
    }
    let kernel = params.mfa.map(|m| bound.var(m.temporal_kernel));
    mfa_forward(tape, &cfg.mfa, kernel, x)
}

/// Motion templates `[m, C, H, W]` of every stage with an extractor, as
/// (0-based stage, maps), for frozen parameters.
pub fn stage_templates(params: &ScnParams, frames: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(as_input(frames)?);
    let mut seen = Vec::new();
    forward_observed(&mut tape, params, &bound, x, &mut |stage, maps| {
        seen.push((stage, maps))
    })?;
    Ok(seen
        .into_iter()
        .map(|(stage, v)| (stage, tape.value(v).clone()))
        .collect())
}

fn check_length(cfg: &ModelConfig, n: usize) -> Result<()> {
    match cfg.frames_after_stages(n) {
        Err((stage, _)) => Err(Error::SequenceTooShort {
            what: format!("motion template at stage {stage}"),
            needed: cfg.min_frames(),
            got: n,
        }),
        Ok(m) if cfg.mfa.enabled && m < cfg.mfa.window => Err(Error::SequenceTooShort {
            what: format!(
                "aggregation window of {} after stage 3 ({m} frames left)",
                cfg.mfa.window
            ),
            needed: cfg.min_frames(),
            got: n,
        }),
        Ok(_) => Ok(()),
    }
}

/// Lifts `[n, H, W]` silhouettes to the `[n, 1, H, W]` network input.
pub fn as_input(frames: &Tensor) -> Result<Tensor> {
    match *frames.shape() {
        [n, h, w] => frames.clone().reshape(&[n, 1, h, w]),
        [_, 1, _, _] => Ok(frames.clone()),
        _ => Err(Error::dim(
            0,
            format!(
                "frames must be [n,H,W] or [n,1,H,W], got {:?}",
                frames.shape()
            ),
        )),
    }
}

/// Inference with frozen parameters.
pub fn extract(params: &ScnParams, frames: &Tensor) -> Result<SequenceFeature> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(as_input(frames)?);
    let y = scn_forward(&mut tape, params, &bound, x)?;
    Ok(SequenceFeature {
        map: tape.into_value(y),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::FusionMode;
    use crate::templates::TemplateKind;
    use crate::tensor::{conv3d_t3, reduce, ReduceMode};
    use proptest::prelude::*;

    /// Window-by-window evaluation straight from the definition.
    fn mfa_direct(f: &Tensor, kernel: &Tensor, cfg: &MfaConfig) -> Tensor {
        let n = f.shape()[0];
        let l = cfg.window;
        let fl = f.frame_len();
        let mut outs = Vec::new();
        for j in 0..n {
            let mut data = Vec::with_capacity(l * fl);
            for i in 0..l {
                data.extend_from_slice(f.frame((j + i) % n));
            }
            let mut ws = f.shape().to_vec();
            ws[0] = l;
            let w = Tensor::new(ws, data).unwrap();
            let y = conv3d_t3(&w, kernel).unwrap();
            outs.extend(reduce(&y, 0, cfg.within).unwrap().into_data());
        }
        let mut s = f.shape().to_vec();
        s[0] = n;
        reduce(&Tensor::new(s, outs).unwrap(), 0, cfg.final_reduce).unwrap()
    }

    fn mfa(f: &Tensor, kernel: &Tensor, cfg: &MfaConfig) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let kv = tape.constant(kernel.clone());
        let y = mfa_forward(&mut tape, cfg, Some(kv), fv)?;
        Ok(tape.into_value(y))
    }

    fn mfa_cfg(window: usize, within: ReduceMode, final_reduce: ReduceMode) -> MfaConfig {
        MfaConfig {
            enabled: true,
            window,
            within,
            final_reduce,
        }
    }

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig {
            channels: [2, 3, 4],
            height: 8,
            width: 4,
            ..Default::default()
        };
        cfg.mfa.window = 3;
        cfg
    }

    fn frames(n: usize, h: usize, w: usize, phase: f64) -> Tensor {
        Tensor::from_fn(&[n, h, w], |i| {
            ((i as f64 * 0.37 + phase).sin() + 1.0) * 0.5
        })
    }

    #[test]
    fn window_counts() {
        assert_eq!(num_windows(30, 7, true), 30);
        assert_eq!(num_windows(7, 7, true), 7);
        assert_eq!(num_windows(30, 7, false), 24);
    }

    #[test]
    fn window_membership_is_uniform() {
        let (n, l) = (11, 4);
        let mut count = vec![0; n];
        for j in 0..num_windows(n, l, true) {
            for i in 0..l {
                count[(j + i) % n] += 1;
            }
        }
        assert!(count.iter().all(|&c| c == l));
    }

    #[test]
    fn matches_direct_windows() {
        let f = Tensor::from_fn(&[9, 3, 2, 2], |i| (i as f64 * 0.77).sin());
        let k = Tensor::from_fn(&[3, 3, 3, 1, 1], |i| (i as f64 * 1.9).cos() * 0.4);
        for within in [ReduceMode::Max, ReduceMode::Mean] {
            for final_reduce in [ReduceMode::Max, ReduceMode::Mean] {
                for l in [3, 5, 9] {
                    let cfg = mfa_cfg(l, within, final_reduce);
                    let fast = mfa(&f, &k, &cfg).unwrap();
                    let slow = mfa_direct(&f, &k, &cfg);
                    assert!(fast.max_abs_diff(&slow) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identity_kernel_gives_plain_max() {
        let c = 3;
        let f = Tensor::from_fn(&[8, c, 2, 3], |i| (i as f64 * 0.53).sin());
        let k = Tensor::from_fn(&[c, c, 3, 1, 1], |i| {
            let (o, ci, d) = (i / (3 * c), (i / 3) % c, i % 3);
            if o == ci && d == 1 {
                1.0
            } else {
                0.0
            }
        });
        let y = mfa(&f, &k, &mfa_cfg(7, ReduceMode::Max, ReduceMode::Max)).unwrap();
        assert_eq!(y, reduce(&f, 0, ReduceMode::Max).unwrap());
    }

    #[test]
    fn short_sequence_is_a_window_error() {
        let f = Tensor::zeros(&[5, 1, 1, 1]);
        let k = Tensor::zeros(&[1, 1, 3, 1, 1]);
        assert!(matches!(
            mfa(&f, &k, &mfa_cfg(7, ReduceMode::Max, ReduceMode::Max)),
            Err(Error::Window { n: 5, window: 7 })
        ));
    }

    #[test]
    fn monotone_coverage_with_identity_kernel() {
        let c = 2;
        let f = Tensor::from_fn(&[12, c, 2, 2], |i| (i as f64 * 0.91).cos());
        let k = Tensor::from_fn(&[c, c, 3, 1, 1], |i| {
            let (o, ci, d) = (i / (3 * c), (i / 3) % c, i % 3);
            f64::from(u8::from(o == ci && d == 1))
        });
        let mut prev: Option<Tensor> = None;
        for l in 3..=12 {
            let mut tape = Tape::new();
            let fv = tape.constant(f.clone());
            let kv = tape.constant(k.clone());
            let cfg = mfa_cfg(l, ReduceMode::Max, ReduceMode::Mean);
            let y = mfa_forward(&mut tape, &cfg, Some(kv), fv).unwrap();
            let y = tape.into_value(y);
            if let Some(p) = &prev {
                assert!(y.data().iter().zip(p.data()).all(|(a, b)| a >= b));
            }
            prev = Some(y);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn rotation_invariance(seed in 0u64..1000, n in 3usize..10, mean_final in any::<bool>()) {
            let l = 3.max(n / 2);
            let f = Tensor::from_fn(&[n, 2, 2, 1], |i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0);
            let k = Tensor::from_fn(&[2, 2, 3, 1, 1], |i| ((i as u64 * 40503 + seed * 7) % 200) as f64 / 100.0 - 1.0);
            let final_reduce = if mean_final { ReduceMode::Mean } else { ReduceMode::Max };
            let cfg = mfa_cfg(l, ReduceMode::Max, final_reduce);
            let base = mfa(&f, &k, &cfg).unwrap();
            for s in 1..n {
                let fl = f.frame_len();
                let mut data = f.data()[s * fl..].to_vec();
                data.extend_from_slice(&f.data()[..s * fl]);
                let rotated = Tensor::new(f.shape().to_vec(), data).unwrap();
                let y = mfa(&rotated, &k, &cfg).unwrap();
                for (a, b) in y.data().iter().zip(base.data()) {
                    prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-12));
                }
            }
        }

        #[test]
        fn feature_shape_ignores_length(n in 15usize..61) {
            let cfg = tiny_config();
            let p = ScnParams::init(&cfg, 1).unwrap();
            let feat = extract(&p, &frames(n, 8, 4, 0.0)).unwrap();
            prop_assert_eq!(feat.map.shape(), &cfg.feature_shape()[..]);
        }
    }

    #[test]
    fn default_output_shape() {
        let cfg = ModelConfig::default();
        let p = ScnParams::init(&cfg, 0).unwrap();
        let feat = extract(&p, &frames(7, 64, 44, 0.3)).unwrap();
        assert_eq!(feat.map.shape(), &[128, 16, 11]);
    }

    #[test]
    fn identical_inputs_have_zero_distance() {
        let p = ScnParams::init(&tiny_config(), 5).unwrap();
        let a = extract(&p, &frames(16, 8, 4, 0.2)).unwrap();
        let b = extract(&p, &frames(16, 8, 4, 0.2)).unwrap();
        assert_eq!(a.distance(&b), 0.0);
    }

    #[test]
    fn baseline_is_set_pooling() {
        let mut cfg = tiny_config();
        cfg.bie.template = None;
        cfg.mfa.enabled = false;
        cfg.mfa.final_reduce = ReduceMode::Max;
        let p = ScnParams::init(&cfg, 2).unwrap();
        let seq = frames(6, 8, 4, 1.0);
        let whole = extract(&p, &seq).unwrap();
        let per_frame: Vec<Tensor> = (0..6)
            .map(|k| {
                let one = Tensor::new(vec![1, 8, 4], seq.frame(k).to_vec()).unwrap();
                extract(&p, &one).unwrap().map
            })
            .collect();
        let mut max = per_frame[0].clone();
        for t in &per_frame[1..] {
            max.data_mut()
                .iter_mut()
                .zip(t.data())
                .for_each(|(m, v)| *m = m.max(*v));
        }
        assert!(whole.map.max_abs_diff(&max) < 1e-12);
    }

    #[test]
    fn untrained_extractors_add_nothing() {
        for kind in TemplateKind::ALL {
            for fusion in FusionMode::ALL {
                let mut cfg = tiny_config();
                cfg.bie.template = Some(kind);
                cfg.bie.fusion = fusion;
                let p = ScnParams::init(&cfg, 9).unwrap();
                let n = 16;
                let seq = frames(n, 8, 4, 0.7);
                let with = extract(&p, &seq).unwrap();

                let mut plain_cfg = cfg.clone();
                plain_cfg.bie.template = None;
                let mut plain = ScnParams::init(&plain_cfg, 9).unwrap();
                let named: Vec<(String, Tensor)> = plain
                    .iter()
                    .map(|(name, _)| (name.to_string(), p.tensor(p.find(name).unwrap()).clone()))
                    .collect();
                plain.load_tensors(named).unwrap();
                let (lead, len) = cfg.appearance_window(n).unwrap();
                let window = Tensor::new(
                    vec![len, 8, 4],
                    seq.data()[lead * 32..(lead + len) * 32].to_vec(),
                )
                .unwrap();
                let without = extract(&plain, &window).unwrap();
                assert_eq!(with, without, "{kind} {fusion}");
            }
        }
    }

    #[test]
    fn too_short_reports_stage() {
        let mut cfg = tiny_config();
        cfg.bie.template = Some(TemplateKind::MultiDiff);
        cfg.bie.fusion = FusionMode::Micro;
        let p = ScnParams::init(&cfg, 0).unwrap();
        let err = extract(&p, &frames(6, 8, 4, 0.0)).unwrap_err();
        match err {
            Error::SequenceTooShort { what, needed, got } => {
                assert!(what.contains("stage 3"), "{what}");
                assert_eq!((needed, got), (9, 6));
            }
            other => panic!("{other:?}"),
        }
    }
}
