//! Convolutional block and stage transition on the tape.

use super::params::{BoundParams, ConvBlockParams, ConvParams};
use crate::error::Result;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub conv1: ConvVars,
    pub conv2: ConvVars,
    pub projection: Option<ConvVars>,
}

impl ConvParams {
    pub fn vars(&self, bound: &BoundParams) -> ConvVars {
        ConvVars {
            weight: bound.var(self.weight),
            bias: self.bias.map(|b| bound.var(b)),
        }
    }
}

impl ConvBlockParams {
    pub fn vars(&self, bound: &BoundParams) -> BlockVars {
        BlockVars {
            conv1: self.conv1.vars(bound),
            conv2: self.conv2.vars(bound),
            projection: self.projection.map(|p| p.vars(bound)),
        }
    }
}

/// Same-size convolution: padding is half the (odd) kernel width.
pub fn conv_same(tape: &mut Tape, conv: &ConvVars, x: Var) -> Result<Var> {
    let k = tape.shape(conv.weight)[2];
    tape.conv2d(x, conv.weight, conv.bias, 1, k / 2)
}

/// `lrelu(conv2(lrelu(conv1(x)))) + skip(x)` on `[C,H,W]` or `[n,C,H,W]`.
pub fn conv_block(tape: &mut Tape, block: &BlockVars, x: Var, slope: f64) -> Result<Var> {
    let h = conv_same(tape, &block.conv1, x)?;
    let h = tape.leaky_relu(h, slope);
    let h = conv_same(tape, &block.conv2, h)?;
    let h = tape.leaky_relu(h, slope);
    let skip = match &block.projection {
        Some(p) => conv_same(tape, p, x)?,
        None => x,
    };
    tape.add(h, skip)
}

/// `conv3x3 → lrelu`, followed by 2×2 max pooling when `pool` is set.
pub fn transition(tape: &mut Tape, conv: &ConvVars, pool: bool, x: Var, slope: f64) -> Result<Var> {
    let h = conv_same(tape, conv, x)?;
    let h = tape.leaky_relu(h, slope);
    if pool {
        tape.max_pool2x2(h)
    } else {
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions, Probe, Tensor};

    fn block_on(
        tape: &mut Tape,
        c: usize,
        fill: impl Fn(usize) -> f64,
        projection: bool,
    ) -> BlockVars {
        let mut conv = |k: usize, seed: usize, bias: bool| ConvVars {
            weight: tape.param(Tensor::from_fn(&[c, c, k, k], |i| fill(i + seed))),
            bias: bias.then(|| tape.param(Tensor::from_fn(&[c], |i| fill(i + seed + 7)))),
        };
        BlockVars {
            conv1: conv(3, 0, true),
            conv2: conv(3, 101, true),
            projection: projection.then(|| conv(1, 211, false)),
        }
    }

    #[test]
    fn zero_weights_pass_input_through() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 5, 4], |i| (i as f64 * 0.37).sin()));
        let b = block_on(&mut tape, 3, |_| 0.0, false);
        let y = conv_block(&mut tape, &b, x, 0.01).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn zero_projection_block_outputs_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[3, 4, 4], |i| (i as f64).cos()));
        let b = block_on(&mut tape, 3, |_| 0.0, true);
        let y = conv_block(&mut tape, &b, x, 0.01).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preserves_spatial_size() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 64, 44], 0.5));
        let b = block_on(&mut tape, 2, |i| (i as f64 * 0.1).sin() * 0.2, false);
        let y = conv_block(&mut tape, &b, x, 0.01).unwrap();
        assert_eq!(tape.shape(y), &[2, 64, 44]);
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 4, 4], 0.5));
        let b = block_on(&mut tape, 2, |_| 0.1, false);
        assert!(matches!(
            conv_block(&mut tape, &b, x, 0.01),
            Err(crate::Error::Dimension { axis: 0, .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x0 = Tensor::from_fn(&[2, 5, 4], |i| ((i * 7 % 11) as f64 - 5.0) * 0.13 + 0.031);
        let opts = GradCheckOptions::default();
        let r = grad_check(
            |x, want| {
                let mut tape = Tape::with_branch_trace();
                let xv = tape.param(x.clone());
                let b = block_on(&mut tape, 2, |i| ((i * 13 % 17) as f64 - 8.0) * 0.05, true);
                let y = conv_block(&mut tape, &b, xv, 0.01)?;
                let value = tape
                    .value(y)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * (i as f64 * 0.71).cos())
                    .sum();
                let grad = if want {
                    let seed = Tensor::from_fn(tape.shape(y), |i| (i as f64 * 0.71).cos());
                    tape.backward(y, seed)?.take(xv)
                } else {
                    None
                };
                Ok(Probe {
                    value,
                    grad,
                    signature: tape.branch_signature(),
                })
            },
            &x0,
            &opts,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
        assert!(r.checked > 30);
    }
}
