//! Separable Gaussian filtering with reflect padding.

use ndarray::{Array2, ArrayView2};

use crate::layers::reflect_index;

/// Normalized 1D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    if sigma <= 0.0 {
        let mut k = vec![0.0; 2 * radius + 1];
        k[radius] = 1.0;
        return k;
    }
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Kernel radius used when none is given: three standard deviations.
pub fn default_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Correlates rows then columns with `kernel`, reflecting at the borders.
pub fn separable_filter(img: ArrayView2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let radius = (kernel.len() / 2) as isize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * img[[r, reflect_index(c as isize + i as isize - radius, w)]];
            }
            tmp[[r, c]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * tmp[[reflect_index(r as isize + i as isize - radius, h), c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

pub fn gaussian_blur(img: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    separable_filter(img, &gaussian_kernel(sigma, default_radius(sigma)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(3.0, 9);
        assert_eq!(k.len(), 19);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..9 {
            assert_eq!(k[i], k[18 - i]);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Array2::from_elem((12, 9), 4.5);
        let out = gaussian_blur(img.view(), 3.0);
        assert!(out.iter().all(|v| (v - 4.5).abs() < 1e-12));
    }

    #[test]
    fn blur_matches_direct_2d_sum() {
        let img = Array2::from_shape_fn((7, 8), |(r, c)| ((r * 31 + c * 17) % 11) as f64);
        let sigma = 1.2;
        let radius = default_radius(sigma);
        let k = gaussian_kernel(sigma, radius);
        let out = gaussian_blur(img.view(), sigma);
        let ri = radius as isize;
        for r in 0..7isize {
            for c in 0..8isize {
                let mut acc = 0.0;
                for dr in -ri..=ri {
                    for dc in -ri..=ri {
                        let v = img[[reflect_index(r + dr, 7), reflect_index(c + dc, 8)]];
                        acc += k[(dr + ri) as usize] * k[(dc + ri) as usize] * v;
                    }
                }
                assert!((out[[r as usize, c as usize]] - acc).abs() < 1e-10);
            }
        }
    }
}
