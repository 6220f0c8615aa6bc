//! Direct-loop convolutions. Slow, obviously correct, and independent of the
//! patch-matrix path; kept as an oracle for the fast kernels.

use super::Tensor;

/// Scalar 2D convolution of a `[C, H, W]` input with a `[O, C, kh, kw]` kernel.
pub fn conv2d_direct(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Tensor {
    let &[c_in, h, w] = input.shape() else {
        panic!("conv2d_direct expects [C,H,W]");
    };
    let &[c_out, kc, kh, kw] = kernel.shape() else {
        panic!("conv2d_direct expects a rank-4 kernel");
    };
    assert_eq!(kc, c_in);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let x = input.data();
    let k = kernel.data();
    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    let y = out.data_mut();
    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..c_in {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (oy * stride + i) as isize - padding as isize;
                            let ix = (ox * stride + j) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += k[((o * c_in + c) * kh + i) * kw + j]
                                * x[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                y[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Scalar temporal convolution of `[n, C, H, W]` with a `[O, C, 3, 1, 1]` kernel.
pub fn conv3d_t3_direct(input: &Tensor, kernel: &Tensor) -> Tensor {
    let &[n, c_in, h, w] = input.shape() else {
        panic!("conv3d_t3_direct expects [n,C,H,W]");
    };
    let c_out = kernel.shape()[0];
    let x = input.data();
    let k = kernel.data();
    let mut out = Tensor::zeros(&[n, c_out, h, w]);
    let y = out.data_mut();
    for t in 0..n {
        for o in 0..c_out {
            for p in 0..h * w {
                let mut acc = 0.0;
                for d in 0..3usize {
                    let src = t as isize + d as isize - 1;
                    if src < 0 || src >= n as isize {
                        continue;
                    }
                    for c in 0..c_in {
                        acc +=
                            k[(o * c_in + c) * 3 + d] * x[((src as usize * c_in) + c) * h * w + p];
                    }
                }
                y[(t * c_out + o) * h * w + p] = acc;
            }
        }
    }
    out
}
