//! Average pixel entropy: a visual-complexity proxy for chart datasets.
//!
//! Each image is converted to 8-bit grayscale (256 intensity levels) with
//! BT.601 luma weights; the per-image Shannon entropy of the normalized
//! intensity histogram is computed with base-2 logarithms (`0 * log 0 = 0`)
//! and averaged over the dataset.

use super::EvalError;
use crate::model::ChartImage;

pub const INTENSITY_LEVELS: usize = 256;

/// Shannon entropy of one image's grayscale histogram, in bits. Always in
/// `[0, 8]`.
pub fn pixel_entropy(image: &ChartImage) -> f64 {
    let mut histogram = [0u64; INTENSITY_LEVELS];
    for px in image.pixels().chunks_exact(3) {
        histogram[luma(px[0], px[1], px[2]) as usize] += 1;
    }
    let n = (image.width() as u64 * image.height() as u64) as f64;
    let mut entropy = 0.0;
    for &count in &histogram {
        if count == 0 {
            continue;
        }
        let p = count as f64 / n;
        entropy -= p * p.log2();
    }
    entropy
}

/// BT.601 luma, rounded to the nearest 8-bit level.
fn luma(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    y.round().clamp(0.0, 255.0) as u8
}

/// Mean per-image entropy across the dataset, in bits.
pub fn avg_pixel_entropy(images: &[ChartImage]) -> Result<f64, EvalError> {
    if images.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let sum: f64 = images.iter().map(pixel_entropy).sum();
    Ok(sum / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(source_id: &str, width: u32, height: u32, f: impl Fn(u32, u32) -> u8) -> ChartImage {
        ChartImage::from_fn(source_id, width, height, |x, y| {
            let v = f(x, y);
            [v, v, v]
        })
        .unwrap()
    }

    #[test]
    fn constant_image_zero_bits() {
        let img = gray("c", 16, 16, |_, _| 127);
        assert!(pixel_entropy(&img).abs() < 1e-9);
    }

    #[test]
    fn two_equal_bins_one_bit() {
        let img = gray("half", 2, 1, |x, _| if x == 0 { 0 } else { 255 });
        assert!((pixel_entropy(&img) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn four_equal_bins_two_bits() {
        let img = gray("quarters", 4, 1, |x, _| (x * 80) as u8);
        assert!((pixel_entropy(&img) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn entropy_within_bounds_and_permutation_invariant() {
        let img = gray("g", 16, 16, |x, y| ((x * 37 + y * 11) % 256) as u8);
        let h = pixel_entropy(&img);
        assert!((0.0..=8.0).contains(&h));

        // Transpose permutes pixel positions; histogram unchanged.
        let transposed = gray("t", 16, 16, |x, y| ((y * 37 + x * 11) % 256) as u8);
        assert!((pixel_entropy(&transposed) - h).abs() < 1e-12);
    }

    #[test]
    fn average_over_dataset() {
        let a = gray("a", 2, 1, |x, _| if x == 0 { 0 } else { 255 });
        let b = gray("b", 16, 16, |_, _| 3);
        let avg = avg_pixel_entropy(&[a, b]).unwrap();
        assert!((avg - 0.5).abs() < 1e-9);
        assert!(matches!(avg_pixel_entropy(&[]), Err(EvalError::EmptyDataset)));
    }
}
