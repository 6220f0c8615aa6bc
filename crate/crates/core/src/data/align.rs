//! Silhouette alignment: vertical crop, aspect-preserving resize to the target
//! height, and a fixed-width window centered on the column centroid.

use image::GrayImage;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ALIGNED_HEIGHT: usize = 64;
pub const ALIGNED_WIDTH: usize = 44;

/// Pixels brighter than this count as foreground.
const THRESHOLD: u8 = 127;

/// Aligns to `height × width`, returning `{0, 1}` values row-major.
pub fn align_bits(img: &GrayImage, height: usize, width: usize) -> Result<Vec<u8>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let fg = |y: usize, x: usize| raw[y * w + x] > THRESHOLD;
    let rows: Vec<usize> = (0..h).filter(|&y| (0..w).any(|x| fg(y, x))).collect();
    let (Some(&top), Some(&bottom)) = (rows.first(), rows.last()) else {
        return Err(Error::DegenerateFrame);
    };
    let crop_h = bottom - top + 1;
    let scale = height as f64 / crop_h as f64;
    let scaled_w = ((w as f64 * scale).round() as usize).max(1);

    // Nearest-neighbour resize of the cropped band.
    let src_y: Vec<usize> = (0..height)
        .map(|y| (((y as f64 + 0.5) / scale) as usize).min(crop_h - 1) + top)
        .collect();
    let src_x: Vec<usize> = (0..scaled_w)
        .map(|x| (((x as f64 + 0.5) / scale) as usize).min(w - 1))
        .collect();
    let mut resized = vec![0u8; height * scaled_w];
    let (mut mass, mut moment) = (0usize, 0usize);
    for (y, &sy) in src_y.iter().enumerate() {
        for (x, &sx) in src_x.iter().enumerate() {
            if fg(sy, sx) {
                resized[y * scaled_w + x] = 1;
                mass += 1;
                moment += x;
            }
        }
    }
    if mass == 0 {
        return Err(Error::DegenerateFrame);
    }
    let center = (moment as f64 / mass as f64).round() as isize;
    let left = center - (width / 2) as isize;

    let mut out = vec![0u8; height * width];
    for y in 0..height {
        for x in 0..width {
            let sx = left + x as isize;
            if sx >= 0 && (sx as usize) < scaled_w {
                out[y * width + x] = resized[y * scaled_w + sx as usize];
            }
        }
    }
    Ok(out)
}

/// Aligns a silhouette to `[1, 64, 44]` with values in `{0, 1}`.
pub fn align_frame(img: &GrayImage) -> Result<Tensor> {
    let bits = align_bits(img, ALIGNED_HEIGHT, ALIGNED_WIDTH)?;
    Tensor::new(
        vec![1, ALIGNED_HEIGHT, ALIGNED_WIDTH],
        bits.into_iter().map(f64::from).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn figure(w: u32, h: u32, inside: impl Fn(u32, u32) -> bool) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            image::Luma([if inside(x, y) { 255 } else { 0 }])
        })
    }

    fn centroid_col(bits: &[u8], width: usize) -> f64 {
        let (mut m, mut s) = (0.0, 0.0);
        for (i, &b) in bits.iter().enumerate() {
            if b == 1 {
                m += 1.0;
                s += (i % width) as f64;
            }
        }
        s / m
    }

    #[test]
    fn centered_figure_is_a_fixed_point() {
        // Full-height figure whose columns 15..=29 give centroid 22.
        let img = figure(44, 64, |x, y| {
            (15..=29).contains(&x) && (y > 5 || x % 2 == 0)
        });
        let t = align_frame(&img).unwrap();
        let expect: Vec<f64> = img.as_raw().iter().map(|&v| f64::from(v / 255)).collect();
        assert_eq!(t.data(), &expect[..]);
    }

    #[test]
    fn band_is_rescaled_to_full_height() {
        let img = figure(60, 100, |x, y| {
            (10..50).contains(&y) && (20..40).contains(&x)
        });
        let t = align_frame(&img).unwrap();
        assert_eq!(t.shape(), &[1, 64, 44]);
        // The band fills every output row.
        for y in 0..64 {
            assert!(t.data()[y * 44..(y + 1) * 44].contains(&1.0));
        }
    }

    #[test]
    fn empty_frame_is_degenerate() {
        let img = GrayImage::new(30, 40);
        assert!(matches!(align_frame(&img), Err(Error::DegenerateFrame)));
    }

    proptest! {
        #[test]
        fn centroid_lands_in_the_middle(
            w in 20u32..120, h in 20u32..120,
            x0 in 0u32..100, y0 in 0u32..100, fw in 1u32..40, fh in 1u32..60, notch in 0u32..7,
        ) {
            let img = figure(w, h, |x, y| {
                x >= x0 % w && x < x0 % w + fw && y >= y0 % h && y < y0 % h + fh && (x + y) % 7 != notch
            });
            prop_assume!(img.as_raw().iter().any(|&v| v > 0));
            let bits = align_bits(&img, 64, 44).unwrap();
            let c = centroid_col(&bits, 44);
            // Only figures that fit the window keep their centroid.
            let wide = align_bits(&img, 64, 4000).unwrap();
            let count = |v: &[u8]| v.iter().filter(|&&b| b == 1).count();
            prop_assume!(count(&wide) == count(&bits));
            prop_assert!((21.0..=23.0).contains(&c), "centroid {c}");
            prop_assert!(bits.iter().all(|&b| b <= 1));
        }
    }
}
