//! Metric scale recovery: RANSAC over optical/acoustic depth ratios, then
//! least-squares refinement against a keyframe.

use crate::pointmap::PointmapPrediction;
use crate::raster::DepthImage;
use crate::geometry::RigidTransform;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScaleError {
    #[error("no depth pairs available for scale estimation")]
    ScaleUnavailable,
    #[error("scale consensus too weak: inlier fraction {inlier_fraction:.3}")]
    ScaleUnreliable { inlier_fraction: f64 },
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("refinement is degenerate: transformed points have zero energy")]
    DegenerateRefinement,
}

/// Matched optical/acoustic depth observations at confident pixels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DepthPairSet {
    /// (d_o, d_a), both strictly positive and finite.
    pub pairs: Vec<(f64, f64)>,
}

impl DepthPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Deterministic stride subsample bounding the set size (keeps scale
    /// estimation O(max_pairs) on large frames).
    pub fn subsample(&self, max_pairs: usize) -> DepthPairSet {
        if self.pairs.len() <= max_pairs || max_pairs == 0 {
            return self.clone();
        }
        let stride = self.pairs.len().div_ceil(max_pairs);
        DepthPairSet { pairs: self.pairs.iter().step_by(stride).copied().collect() }
    }
}

/// Selects pixels passing all four gates: positive finite optical depth,
/// positive finite acoustic depth, and confidence strictly above the
/// image-wide mean (computed over every pixel, including invalid ones).
pub fn filter_depth_pairs(
    d_opt: &DepthImage,
    d_ac: &DepthImage,
    conf: &[f32],
) -> DepthPairSet {
    assert_eq!(d_opt.width, d_ac.width, "depth image widths differ");
    assert_eq!(d_opt.height, d_ac.height, "depth image heights differ");
    assert_eq!(conf.len(), d_opt.data.len(), "confidence size mismatch");
    let mean = conf.iter().map(|&c| c as f64).sum::<f64>() / conf.len() as f64;
    let mut pairs = Vec::new();
    for i in 0..conf.len() {
        let d_o = d_opt.data[i];
        let d_a = d_ac.data[i];
        if d_o.is_finite() && d_o > 0.0 && d_a.is_finite() && d_a > 0.0 && (conf[i] as f64) > mean
        {
            pairs.push((d_o as f64, d_a as f64));
        }
    }
    DepthPairSet { pairs }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier band |s*d_o - d_a| < epsilon_in, meters. The acoustic depth is
    /// quantized at the voxel size, so this must exceed one voxel.
    pub epsilon_in: f64,
    pub min_inlier_fraction: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iterations: 200, epsilon_in: 1.5 * 0.05, min_inlier_fraction: 0.15, seed: 0 }
    }
}

/// One-sample RANSAC on the scale ratio. Each iteration hypothesizes
/// s = d_a/d_o from a single pair; the winner is polished to the mode of
/// its inlier ratios, and the returned count is the polished scale's inlier
/// count at the full epsilon. The mode matters: a voxelized acoustic range
/// errs by a near-constant offset per surface patch, which in ratio space
/// smears into a broad ramp (the offset divides by a varying pixel depth),
/// while surfaces the grid resolves exactly pile up in a sharp peak. A mean
/// or median polish settles inside the ramp; the densest fixed-width window
/// lands on the peak.
pub fn ransac_scale(
    pairs: &DepthPairSet,
    cfg: &RansacConfig,
) -> Result<(f64, usize), ScaleError> {
    if pairs.is_empty() {
        return Err(ScaleError::ScaleUnavailable);
    }
    let n = pairs.pairs.len();
    let count_inliers = |s: f64| -> usize {
        pairs.pairs.iter().filter(|(d_o, d_a)| (s * d_o - d_a).abs() < cfg.epsilon_in).count()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best_s = pairs.pairs[0].1 / pairs.pairs[0].0;
    let mut best_count = count_inliers(best_s);
    for _ in 0..cfg.iterations {
        let (d_o, d_a) = pairs.pairs[rng.gen_range(0..n)];
        let s = d_a / d_o;
        let count = count_inliers(s);
        if count > best_count {
            best_count = count;
            best_s = s;
        }
    }

    // Mode of the consensus ratios: median of the densest window one
    // percent of the winning scale wide.
    let mut s_m = best_s;
    let mut ratios: Vec<f64> = pairs
        .pairs
        .iter()
        .filter(|(d_o, d_a)| (best_s * d_o - d_a).abs() < cfg.epsilon_in)
        .map(|(d_o, d_a)| d_a / d_o)
        .collect();
    if !ratios.is_empty() {
        ratios.sort_by(|a, b| a.total_cmp(b));
        let m = ratios.len();
        let width = 0.01 * best_s.abs();
        let (mut best_i, mut best_len) = (0usize, 0usize);
        let mut j = 0usize;
        for i in 0..m {
            if j < i {
                j = i;
            }
            while j < m && ratios[j] - ratios[i] <= width {
                j += 1;
            }
            if j - i > best_len {
                best_len = j - i;
                best_i = i;
            }
        }
        let w = &ratios[best_i..best_i + best_len];
        s_m = if best_len % 2 == 1 {
            w[best_len / 2]
        } else {
            0.5 * (w[best_len / 2 - 1] + w[best_len / 2])
        };
    }
    let inlier_count = count_inliers(s_m);
    let fraction = inlier_count as f64 / n as f64;
    if fraction < cfg.min_inlier_fraction {
        return Err(ScaleError::ScaleUnreliable { inlier_fraction: fraction });
    }
    Ok((s_m, inlier_count))
}

/// Rescales both pointmaps to metric; confidences and features untouched.
pub fn apply_scale(
    mut pred: PointmapPrediction,
    s_m: f64,
) -> Result<PointmapPrediction, ScaleError> {
    if !(s_m > 0.0) || !s_m.is_finite() {
        return Err(ScaleError::NonPositiveScale(s_m));
    }
    pred.scale_points(s_m);
    Ok(pred)
}

/// Cross-keyframe scale refinement: minimizes
/// sum ||a_m - s * (T_kf b_m)||^2 over s, where a are keyframe points and
/// b are matched frame points. The transform is applied with rotation and
/// translation before the scale multiplies the result, so the minimizer is
/// the plain projection coefficient. Note the scale deliberately multiplies
/// the fully transformed point, baseline included.
pub fn refine_scale(
    pts_k: &[Vector3<f64>],
    pts_f: &[Vector3<f64>],
    t_kf: &RigidTransform,
) -> Result<f64, ScaleError> {
    assert_eq!(pts_k.len(), pts_f.len(), "matched point lists must align");
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, pf) in pts_k.iter().zip(pts_f) {
        let b = t_kf.transform_point(pf);
        num += a.dot(&b);
        den += b.dot(&b);
    }
    if den <= 0.0 || !den.is_finite() {
        return Err(ScaleError::DegenerateRefinement);
    }
    Ok(num / den)
}
