//! The two-view dense prediction contract, optical depth, and projective
//! data association.
//!
//! A prediction pairs every pixel of two images with 3D points in a shared
//! but arbitrary scale, per-pixel confidences, and descriptor features. The
//! provider trait is the seam where a learned predictor plugs in; this crate
//! ships a ground-truth oracle (`crate::oracle`) and external-process /
//! replay providers (`crate::extproc`).

use crate::geometry::{PinholeCamera, RigidTransform};
use crate::raster::{DepthImage, ImageRgb};
use nalgebra::Vector3;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PointmapError {
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("image {0}x{1} exceeds the provider's maximum dimension {2}")]
    TooLarge(usize, usize, usize),
    #[error("malformed prediction arrays: {0}")]
    BadArrays(String),
    #[error("prediction cache: {0}")]
    BadCache(String),
    #[error("provider: {0}")]
    Provider(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Largest image dimension the prediction contract accepts.
pub const MAX_PREDICT_DIM: usize = 512;

/// Dense two-view prediction. For a call on images (i, j): `x_ii` holds
/// frame i's geometry in frame i's camera, `x_ij` holds frame j's geometry
/// (indexed by frame j's pixels) also expressed in frame i's camera. Both
/// share one unknown scale factor.
#[derive(Debug, Clone, PartialEq)]
pub struct PointmapPrediction {
    pub width: usize,
    pub height: usize,
    /// Feature dimension d.
    pub dim: usize,
    pub x_ii: Vec<Vector3<f64>>,
    pub x_ij: Vec<Vector3<f64>>,
    pub c_i: Vec<f32>,
    pub c_j: Vec<f32>,
    /// Row-major H*W*d descriptor features.
    pub d_i: Vec<f32>,
    pub d_j: Vec<f32>,
    /// Per-pixel feature confidences in [0, 1].
    pub q_i: Vec<f32>,
    pub q_j: Vec<f32>,
}

impl PointmapPrediction {
    pub fn new_empty(width: usize, height: usize, dim: usize) -> Result<Self, PointmapError> {
        if width == 0 || height == 0 || dim == 0 {
            return Err(PointmapError::BadArrays(format!("dims {width}x{height}, d={dim}")));
        }
        let n = width * height;
        Ok(Self {
            width,
            height,
            dim,
            x_ii: vec![Vector3::from_element(f64::NAN); n],
            x_ij: vec![Vector3::from_element(f64::NAN); n],
            c_i: vec![0.0; n],
            c_j: vec![0.0; n],
            d_i: vec![0.0; n * dim],
            d_j: vec![0.0; n * dim],
            q_i: vec![0.0; n],
            q_j: vec![0.0; n],
        })
    }

    #[inline]
    pub fn px(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    #[inline]
    pub fn feature_i(&self, idx: usize) -> &[f32] {
        &self.d_i[idx * self.dim..(idx + 1) * self.dim]
    }

    #[inline]
    pub fn feature_j(&self, idx: usize) -> &[f32] {
        &self.d_j[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<(), PointmapError> {
        let n = self.width * self.height;
        let ok = self.x_ii.len() == n
            && self.x_ij.len() == n
            && self.c_i.len() == n
            && self.c_j.len() == n
            && self.q_i.len() == n
            && self.q_j.len() == n
            && self.d_i.len() == n * self.dim
            && self.d_j.len() == n * self.dim;
        if !ok {
            return Err(PointmapError::BadArrays("array lengths disagree".into()));
        }
        if self.c_i.iter().chain(&self.c_j).any(|&c| c < 0.0 || !c.is_finite()) {
            return Err(PointmapError::BadArrays("negative or non-finite confidence".into()));
        }
        Ok(())
    }

    /// Multiplies both pointmaps by s in place (metric rescaling).
    pub fn scale_points(&mut self, s: f64) {
        for p in self.x_ii.iter_mut().chain(self.x_ij.iter_mut()) {
            *p *= s;
        }
    }
}

/// One captured frame: image plus the kinematic world-from-camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub id: u64,
    pub image: ImageRgb,
    pub pose: RigidTransform,
}

/// The prediction seam. Learned providers must use only the images; the
/// frame ids and kinematic poses are available for oracles and caching.
/// Implementations may keep per-call state; calls are serialized.
pub trait PointmapProvider {
    fn predict(
        &mut self,
        frame_i: &FrameInput,
        frame_j: &FrameInput,
    ) -> Result<PointmapPrediction, PointmapError>;
}

/// Checks the shared size contract for a provider call.
pub fn check_predict_inputs(
    frame_i: &FrameInput,
    frame_j: &FrameInput,
) -> Result<(usize, usize), PointmapError> {
    let (wi, hi) = (frame_i.image.width, frame_i.image.height);
    let (wj, hj) = (frame_j.image.width, frame_j.image.height);
    if (wi, hi) != (wj, hj) {
        return Err(PointmapError::SizeMismatch(wi, hi, wj, hj));
    }
    if wi.max(hi) > MAX_PREDICT_DIM {
        return Err(PointmapError::TooLarge(wi, hi, MAX_PREDICT_DIM));
    }
    Ok((wi, hi))
}

/// Optical depth: per-pixel norm of the frame-i pointmap. Non-finite or
/// non-positive norms become invalid pixels.
pub fn optical_depth(pred: &PointmapPrediction) -> DepthImage {
    let mut out = DepthImage::new_invalid(pred.width, pred.height).expect("validated dims");
    for (d, p) in out.data.iter_mut().zip(&pred.x_ii) {
        let n = p.norm();
        if n.is_finite() && n > 0.0 {
            *d = n as f32;
        }
    }
    out
}

/// Pixel correspondences frame -> keyframe. Frame-side pixels are unique by
/// construction (one entry per source pixel).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchSet {
    pub pairs: Vec<((u32, u32), (u32, u32))>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of distinct keyframe pixels hit by the matches.
    pub fn unique_keyframe_pixels(&self) -> usize {
        let mut targets: Vec<(u32, u32)> = self.pairs.iter().map(|&(_, k)| k).collect();
        targets.sort_unstable();
        targets.dedup();
        targets.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    /// Depth agreement gate as a fraction of the keyframe depth. Acoustic
    /// scale error is multiplicative, so the two geometries being associated
    /// disagree by a near-constant depth ratio; a relative band tolerates
    /// that while still rejecting occlusion jumps, which in cluttered scenes
    /// change depth by far more than any plausible scale error.
    pub delta_depth: f64,
    /// Minimum feature cosine similarity.
    pub rho_feat: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self { delta_depth: 0.15, rho_feat: 0.7 }
    }
}

/// The keyframe-side arrays projective association needs. `points` are the
/// keyframe's metric camera-frame points; `conf`, `features`, `feat_conf`
/// index the same pixel grid.
#[derive(Debug, Clone, Copy)]
pub struct KeyframeView<'a> {
    pub cam: &'a PinholeCamera,
    pub points: &'a [Vector3<f64>],
    pub conf: &'a [f32],
    pub features: &'a [f32],
    pub feat_conf: &'a [f32],
    pub dim: usize,
}

/// The frame-side arrays: metric points and descriptors over a pixel grid.
/// Predictions and stored keyframes both provide this view, so keyframes
/// can be matched against each other for edge creation.
#[derive(Debug, Clone, Copy)]
pub struct FrameView<'a> {
    pub width: usize,
    pub height: usize,
    pub points: &'a [Vector3<f64>],
    pub features: &'a [f32],
    pub dim: usize,
}

impl PointmapPrediction {
    /// Frame-side view of this prediction (assumes points already metric).
    pub fn frame_view(&self) -> FrameView<'_> {
        FrameView {
            width: self.width,
            height: self.height,
            points: &self.x_ii,
            features: &self.d_i,
            dim: self.dim,
        }
    }
}

#[inline]
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    let denom = (na * nb).sqrt();
    if denom <= 0.0 {
        return 0.0;
    }
    dot / denom
}

/// Projective data association. Each frame pixel's metric point (the frame
/// prediction is assumed rescaled to meters) is mapped through `t_kf`
/// (keyframe-from-frame) into the keyframe camera; a match is emitted iff
/// the projection lands in bounds, the projected ray length agrees with the
/// keyframe's stored depth at the landing pixel within a `delta_depth`
/// fraction of that depth, and the feature cosine similarity reaches
/// `rho_feat`.
pub fn match_projective(
    frame: &FrameView<'_>,
    keyframe: &KeyframeView<'_>,
    t_kf: &RigidTransform,
    params: &MatchParams,
) -> MatchSet {
    assert_eq!(frame.dim, keyframe.dim, "feature dimensions differ");
    let kw = keyframe.cam.width;
    let mut pairs = Vec::new();
    for vf in 0..frame.height {
        for uf in 0..frame.width {
            let fi = vf * frame.width + uf;
            let p = frame.points[fi];
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                continue;
            }
            let pk = t_kf.transform_point(&p);
            let Some((u, v)) = keyframe.cam.project(&pk) else { continue };
            if !keyframe.cam.in_bounds(u, v) {
                continue;
            }
            let (uk, vk) = (u as usize, v as usize);
            let ki = vk * kw + uk;
            let kf_depth = keyframe.points[ki].norm();
            if !kf_depth.is_finite() || kf_depth <= 0.0 {
                continue;
            }
            if (pk.norm() - kf_depth).abs() >= params.delta_depth * kf_depth {
                continue;
            }
            let sim = cosine_similarity(
                &frame.features[fi * frame.dim..(fi + 1) * frame.dim],
                &keyframe.features[ki * keyframe.dim..(ki + 1) * keyframe.dim],
            );
            if sim < params.rho_feat {
                continue;
            }
            pairs.push(((uf as u32, vf as u32), (uk as u32, vk as u32)));
        }
    }
    MatchSet { pairs }
}

const CACHE_MAGIC: &[u8; 4] = b"PMPC";
const CACHE_VERSION: u32 = 1;

/// Prediction cache file, little-endian: magic "PMPC", u32 version, u32 H,
/// u32 W, u32 d, then f32 arrays in order X_ii (H*W*3), X_ij (H*W*3), C_i,
/// C_j, D_i (H*W*d), D_j, Q_i, Q_j.
pub fn save_prediction(path: &Path, pred: &PointmapPrediction) -> Result<(), PointmapError> {
    pred.validate()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CACHE_MAGIC)?;
    f.write_all(&CACHE_VERSION.to_le_bytes())?;
    f.write_all(&(pred.height as u32).to_le_bytes())?;
    f.write_all(&(pred.width as u32).to_le_bytes())?;
    f.write_all(&(pred.dim as u32).to_le_bytes())?;
    let write_points = |f: &mut std::io::BufWriter<std::fs::File>,
                        pts: &[Vector3<f64>]|
     -> std::io::Result<()> {
        for p in pts {
            for k in 0..3 {
                f.write_all(&(p[k] as f32).to_le_bytes())?;
            }
        }
        Ok(())
    };
    write_points(&mut f, &pred.x_ii)?;
    write_points(&mut f, &pred.x_ij)?;
    for arr in [&pred.c_i, &pred.c_j, &pred.d_i, &pred.d_j, &pred.q_i, &pred.q_j] {
        for &v in arr.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_prediction(path: &Path) -> Result<PointmapPrediction, PointmapError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(PointmapError::BadCache("bad magic".into()));
    }
    let version = read_u32(&mut f)?;
    if version != CACHE_VERSION {
        return Err(PointmapError::BadCache(format!("unsupported version {version}")));
    }
    let height = read_u32(&mut f)? as usize;
    let width = read_u32(&mut f)? as usize;
    let dim = read_u32(&mut f)? as usize;
    if width == 0 || height == 0 || dim == 0 || width * height > 16_000_000 || dim > 4096 {
        return Err(PointmapError::BadCache(format!("header {width}x{height}, d={dim}")));
    }
    let mut pred = PointmapPrediction::new_empty(width, height, dim)?;
    let read_points =
        |f: &mut std::io::BufReader<std::fs::File>, pts: &mut [Vector3<f64>]| -> Result<(), PointmapError> {
            let mut buf = [0u8; 4];
            for p in pts.iter_mut() {
                for k in 0..3 {
                    f.read_exact(&mut buf)?;
                    p[k] = f32::from_le_bytes(buf) as f64;
                }
            }
            Ok(())
        };
    read_points(&mut f, &mut pred.x_ii)?;
    read_points(&mut f, &mut pred.x_ij)?;
    let mut buf = [0u8; 4];
    for arr in [
        &mut pred.c_i,
        &mut pred.c_j,
        &mut pred.d_i,
        &mut pred.d_j,
        &mut pred.q_i,
        &mut pred.q_j,
    ] {
        for v in arr.iter_mut() {
            f.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
    }
    // Trailing garbage means the file is not what we wrote.
    let mut probe = [0u8; 1];
    if f.read(&mut probe)? != 0 {
        return Err(PointmapError::BadCache("trailing bytes".into()));
    }
    pred.validate()?;
    Ok(pred)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, PointmapError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
