//! Image-quality scoring for generated images and QA pairs.
//!
//! The structural similarity here is the global-statistics form over the
//! whole grayscale image (population means, variances, covariance; C1 =
//! 0.01^2, C2 = 0.03^2), not sliding-window SSIM. The composite image score
//! measures how much detail survives a round trip through the encoder crop
//! size, for the whole image and each quadrant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::PixelGrid;
use crate::scorer::SimilarityScorer;
use crate::tensor::{bilinear_resize, Tensor};

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Weight of the whole-image term in the combined SSIM.
pub const SSIM_FULL_WEIGHT: f64 = 1.0;
/// Weight of each of the four sub-image terms.
pub const SSIM_SUB_WEIGHT: f64 = 0.25;
/// Weight of the combined SSIM against the similarity score in the total.
pub const TOTAL_SSIM_WEIGHT: f64 = 0.5;

/// Global-statistics structural similarity of two same-shape grayscale
/// grids with values in [0, 1]. Symmetric, 1 for identical inputs.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("ssim shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.numel() as f64;
    if n == 0.0 {
        return Err(Error::invalid("ssim of empty grids"));
    }
    let mu_a: f64 = a.data().iter().sum::<f64>() / n;
    let mu_b: f64 = b.data().iter().sum::<f64>() / n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        var_a += (x - mu_a) * (x - mu_a);
        var_b += (y - mu_b) * (y - mu_b);
        cov += (x - mu_a) * (y - mu_b);
    }
    var_a /= n;
    var_b /= n;
    cov /= n;
    Ok(((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
        / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)))
}

/// Composite image-generation quality score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageScore {
    /// Whole image vs its crop-size round trip.
    pub ssim_w: f64,
    /// Quadrants vs their round trips, row-major (i, j) in {1, 2}^2.
    pub ssim_s: [f64; 4],
    /// `1.0 * ssim_w + sum(0.25 * ssim_s)`.
    pub ssim_a: f64,
    pub clip_score: f64,
    /// `clip_score + 0.5 * ssim_a`.
    pub total: f64,
}

fn round_trip_ssim(gray: &Tensor, crop: usize) -> Result<f64> {
    let (h, w) = (gray.shape()[0], gray.shape()[1]);
    let grid = gray.reshaped(vec![h, w, 1])?;
    let down = bilinear_resize(&grid, crop, crop)?;
    let back = bilinear_resize(&down, h, w)?;
    ssim(gray, &back.reshaped(vec![h, w])?)
}

/// Scores one generated image against its description: similarity plus the
/// weighted SSIM of the crop-size round trip over the full image and its
/// four quadrants.
pub fn image_generation_score(
    image: &PixelGrid,
    crop_size: usize,
    scorer: &dyn SimilarityScorer,
    description: &str,
) -> Result<ImageScore> {
    if crop_size == 0 {
        return Err(Error::invalid("crop size must be positive"));
    }
    if image.height() % 2 != 0 || image.width() % 2 != 0 {
        return Err(Error::invalid(format!(
            "image dims {}x{} must be even for quadrant scoring",
            image.height(),
            image.width()
        )));
    }
    let ssim_w = round_trip_ssim(&image.to_gray(), crop_size)?;
    let quads = image.quadrants()?;
    let mut ssim_s = [0.0; 4];
    for (i, q) in quads.iter().enumerate() {
        ssim_s[i] = round_trip_ssim(&q.to_gray(), crop_size)?;
    }
    let ssim_a = SSIM_FULL_WEIGHT * ssim_w + ssim_s.iter().map(|s| SSIM_SUB_WEIGHT * s).sum::<f64>();
    let clip_score = scorer.similarity(description, image);
    let total = clip_score + TOTAL_SSIM_WEIGHT * ssim_a;
    Ok(ImageScore { ssim_w, ssim_s, ssim_a, clip_score, total })
}

/// QA pair score: the mean similarity between each declarative statement
/// and the image.
pub fn qa_final_score(
    statements: &[String],
    image: &PixelGrid,
    scorer: &dyn SimilarityScorer,
) -> Result<f64> {
    if statements.is_empty() {
        return Err(Error::invalid("QA scoring needs at least one statement"));
    }
    let sum: f64 = statements.iter().map(|s| scorer.similarity(s, image)).sum();
    Ok(sum / statements.len() as f64)
}
