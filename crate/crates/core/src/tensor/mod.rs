//! Dense f64 tensors, the differentiable operations the network needs, and a
//! finite-difference gradient checker.
//!
//! Tensors are row-major. Operations that participate in training are recorded
//! on a [`Tape`]; the free functions in this module are tape-free conveniences
//! that evaluate a single operation.

mod gradcheck;
pub(crate) mod kernels;
pub mod reference;
mod snapshot;
mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Probe};
pub use snapshot::{read_snapshot, read_snapshot_from, write_snapshot, write_snapshot_to};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Slope of the leaky ReLU used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(Error::dim(axis, "tensor dimensions must be positive"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                0,
                format!(
                    "shape {:?} holds {} values, got {}",
                    shape,
                    expected,
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of values in one slice along axis 0.
    pub fn frame_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// The `i`-th slice along axis 0.
    pub fn frame(&self, i: usize) -> &[f64] {
        let len = self.frame_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(
                0,
                format!("cannot reshape {:?} into {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Reduction applied along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReduceMode {
    Mean,
    Max,
    Median,
}

impl std::str::FromStr for ReduceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ReduceMode::Mean),
            "max" => Ok(ReduceMode::Max),
            "median" => Ok(ReduceMode::Median),
            other => Err(Error::Config(format!(
                "unknown reduction `{other}` (expected mean, max or median)"
            ))),
        }
    }
}

impl std::fmt::Display for ReduceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReduceMode::Mean => "mean",
            ReduceMode::Max => "max",
            ReduceMode::Median => "median",
        })
    }
}

/// Elementwise operation kinds exposed by [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise<'a> {
    Abs,
    LeakyRelu(f64),
    /// Adds the operand. It may match the input shape or drop the leading axis,
    /// in which case it is broadcast along axis 0.
    Add(&'a Tensor),
    ScalarMul(f64),
}

/// 2D convolution of a `[C_in, H, W]` (or frame-batched `[N, C_in, H, W]`)
/// input with a `[C_out, C_in, kh, kw]` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let k = tape.constant(kernel.clone());
    let y = tape.conv2d(x, k, None, stride, padding)?;
    Ok(tape.into_value(y))
}

/// Temporal convolution with a `[C, C, 3, 1, 1]` kernel over `[n, C, H, W]`,
/// zero-padded by one frame at each end.
pub fn conv3d_t3(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let k = tape.constant(kernel.clone());
    let y = tape.conv3d_t3(x, k)?;
    Ok(tape.into_value(y))
}

pub fn reduce(input: &Tensor, axis: usize, mode: ReduceMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = tape.reduce(x, axis, mode)?;
    Ok(tape.into_value(y))
}

pub fn elementwise(input: &Tensor, kind: Elementwise<'_>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = match kind {
        Elementwise::Abs => tape.abs(x),
        Elementwise::LeakyRelu(slope) => tape.leaky_relu(x, slope),
        Elementwise::Add(other) => {
            let b = tape.constant(other.clone());
            tape.add(x, b)?
        }
        Elementwise::ScalarMul(w) => tape.scale(x, w),
    };
    Ok(tape.into_value(y))
}

pub fn max_pool2x2(input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = tape.max_pool2x2(x)?;
    Ok(tape.into_value(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn constructor_checks_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f64 - 4.0);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv2d_zero_kernel() {
        let x = Tensor::from_fn(&[2, 5, 4], |i| (i as f64).sin());
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let y = conv2d(&x, &k, 1, 1).unwrap();
        assert_eq!(y.shape(), &[3, 5, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_hand_sum() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y, t(&[1, 1, 1], &[5.0]));
    }

    #[test]
    fn conv2d_output_size_with_stride() {
        let x = Tensor::zeros(&[1, 7, 6]);
        let k = Tensor::zeros(&[2, 1, 3, 3]);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3]);
    }

    #[test]
    fn conv2d_channel_mismatch_names_axis() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        match conv2d(&x, &k, 1, 1) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, 0),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn conv3d_identity_center_slice() {
        let x = Tensor::from_fn(&[4, 2, 2, 3], |i| (i as f64 * 0.37).cos());
        let mut k = Tensor::zeros(&[2, 2, 3, 1, 1]);
        for c in 0..2 {
            k.data_mut()[c * 6 + c * 3 + 1] = 1.0;
        }
        assert_eq!(conv3d_t3(&x, &k).unwrap(), x);
    }

    #[test]
    fn conv3d_single_frame_all_ones() {
        let x = t(&[1, 1, 1, 2], &[3.0, -1.5]);
        let k = Tensor::full(&[1, 1, 3, 1, 1], 1.0);
        assert_eq!(conv3d_t3(&x, &k).unwrap(), x);
    }

    #[test]
    fn conv3d_padded_sums() {
        let x = t(&[3, 1, 1, 1], &[1.0, 2.0, 3.0]);
        let k = Tensor::full(&[1, 1, 3, 1, 1], 1.0);
        assert_eq!(
            conv3d_t3(&x, &k).unwrap(),
            t(&[3, 1, 1, 1], &[3.0, 6.0, 5.0])
        );
    }

    #[test]
    fn conv3d_channel_mismatch() {
        let x = Tensor::zeros(&[3, 2, 1, 1]);
        let k = Tensor::zeros(&[3, 3, 3, 1, 1]);
        assert!(matches!(conv3d_t3(&x, &k), Err(Error::Dimension { .. })));
    }

    #[test]
    fn reductions() {
        let odd = t(&[3], &[1.0, 2.0, 9.0]);
        assert_eq!(reduce(&odd, 0, ReduceMode::Median).unwrap().data(), &[2.0]);
        let even = t(&[4], &[1.0, 2.0, 3.0, 10.0]);
        assert_eq!(reduce(&even, 0, ReduceMode::Median).unwrap().data(), &[2.5]);
        let m = t(&[3], &[-1.0, 0.0, 4.0]);
        assert_eq!(reduce(&m, 0, ReduceMode::Max).unwrap().data(), &[4.0]);
    }

    #[test]
    fn reduce_removes_axis() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let y = reduce(&x, 1, ReduceMode::Mean).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert_eq!(y.data()[0], (0.0 + 4.0 + 8.0) / 3.0);
        let y = reduce(&Tensor::scalar(2.0), 0, ReduceMode::Max).unwrap();
        assert_eq!(y.shape(), &[1]);
    }

    #[test]
    fn reduce_axis_out_of_range() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(reduce(&x, 2, ReduceMode::Mean).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let x = t(&[2], &[-2.0, 3.0]);
        assert_eq!(
            elementwise(&x, Elementwise::Abs).unwrap().data(),
            &[2.0, 3.0]
        );
        let y = elementwise(&t(&[1], &[-1.0]), Elementwise::LeakyRelu(0.01)).unwrap();
        assert_eq!(y.data(), &[-0.01]);
        let y = elementwise(&t(&[2], &[1.0, 2.0]), Elementwise::ScalarMul(0.5)).unwrap();
        assert_eq!(y.data(), &[0.5, 1.0]);
    }

    #[test]
    fn add_broadcasts_along_frames() {
        let a = Tensor::from_fn(&[3, 2], |i| i as f64);
        let b = t(&[2], &[10.0, 20.0]);
        let y = elementwise(&a, Elementwise::Add(&b)).unwrap();
        assert_eq!(y.data(), &[10.0, 21.0, 12.0, 23.0, 14.0, 25.0]);
        let bad = t(&[3], &[1.0, 2.0, 3.0]);
        assert!(elementwise(&a, Elementwise::Add(&bad)).is_err());
    }

    #[test]
    fn max_pool_examples() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(max_pool2x2(&x).unwrap(), t(&[1, 1, 1], &[4.0]));
        let c = Tensor::full(&[2, 4, 6], 1.5);
        assert_eq!(max_pool2x2(&c).unwrap(), Tensor::full(&[2, 2, 3], 1.5));
        assert!(max_pool2x2(&Tensor::zeros(&[1, 3, 2])).is_err());
    }

    #[test]
    fn max_pool_tie_routes_to_first_index() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[1, 2, 2], 4.0));
        let y = tape.max_pool2x2(x).unwrap();
        let grads = tape.backward(y, Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
