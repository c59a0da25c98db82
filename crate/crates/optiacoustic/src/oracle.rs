//! Ground-truth pointmap provider: the stand-in for the learned two-view
//! predictor, built on the scene simulator.
//!
//! Each call renders true geometry for both frames, multiplies it by a
//! per-call random scale (the defining nuisance of the real predictor),
//! optionally corrupts it with Gaussian noise and outliers, and attenuates
//! confidences with range and turbidity. Descriptors are sampled from a
//! deterministic hashed lattice field, so two observations of the same
//! surface patch agree regardless of viewpoint while distant patches are
//! uncorrelated — the property projective association relies on.

use crate::geometry::PinholeCamera;
use crate::pointmap::{
    check_predict_inputs, FrameInput, PointmapError, PointmapPrediction, PointmapProvider,
};
use crate::sim::{attenuate_confidence, Scene, TurbidityModel};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    /// Stddev of Gaussian noise added to the scaled points, meters.
    pub noise_sigma: f64,
    /// Fraction of valid pixels whose points get a gross range error.
    pub outlier_fraction: f64,
    /// When set, the per-call scale is pinned to this value.
    pub forced_scale: Option<f64>,
    pub scale_range: (f64, f64),
    pub turbidity: TurbidityModel,
    pub seed: u64,
    /// Confidence at zero range.
    pub base_confidence: f64,
    /// Confidence e-folding range in meters.
    pub confidence_falloff: f64,
    pub feature_dim: usize,
    /// Stddev of per-pixel descriptor noise.
    pub feature_noise: f64,
    /// Feature confidence for valid pixels.
    pub base_feat_conf: f32,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            forced_scale: None,
            scale_range: (0.25, 4.0),
            turbidity: TurbidityModel::clear(),
            seed: 7,
            base_confidence: 8.0,
            confidence_falloff: 4.0,
            feature_dim: 16,
            feature_noise: 0.05,
            base_feat_conf: 0.9,
        }
    }
}

pub struct OracleProvider {
    pub scene: Scene,
    pub cam: PinholeCamera,
    pub cfg: OracleConfig,
}

impl OracleProvider {
    pub fn new(scene: Scene, cam: PinholeCamera, cfg: OracleConfig) -> Self {
        Self { scene, cam, cfg }
    }

    /// The scale this provider draws for a given frame pair; exposed so
    /// tests can check scale recovery against the injected value.
    pub fn injected_scale(&self, id_i: u64, id_j: u64) -> f64 {
        match self.cfg.forced_scale {
            Some(s) => s,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(call_seed(self.cfg.seed, id_i, id_j));
                rng.gen_range(self.cfg.scale_range.0..self.cfg.scale_range.1)
            }
        }
    }
}

impl PointmapProvider for OracleProvider {
    fn predict(
        &mut self,
        frame_i: &FrameInput,
        frame_j: &FrameInput,
    ) -> Result<PointmapPrediction, PointmapError> {
        let (w, h) = check_predict_inputs(frame_i, frame_j)?;
        if (w, h) != (self.cam.width, self.cam.height) {
            return Err(PointmapError::Provider(format!(
                "oracle camera is {}x{}, images are {w}x{h}",
                self.cam.width, self.cam.height
            )));
        }
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(call_seed(cfg.seed, frame_i.id, frame_j.id));
        // Draw order matters: scale first, so injected_scale stays in sync.
        let s = match cfg.forced_scale {
            Some(s) => s,
            None => rng.gen_range(cfg.scale_range.0..cfg.scale_range.1),
        };

        let (depth_i, _) = self.scene.raycast(&self.cam, &frame_i.pose);
        let same_frame = frame_i.id == frame_j.id && frame_i.pose == frame_j.pose;
        let depth_j = if same_frame {
            depth_i.clone()
        } else {
            self.scene.raycast(&self.cam, &frame_j.pose).0
        };

        let mut pred = PointmapPrediction::new_empty(w, h, cfg.feature_dim)?;
        let t_iw = frame_i.pose.invert();
        let noise = if cfg.noise_sigma > 0.0 {
            Some(Normal::new(0.0, cfg.noise_sigma).expect("sigma validated"))
        } else {
            None
        };
        let feat_noise = if cfg.feature_noise > 0.0 {
            Some(Normal::new(0.0, cfg.feature_noise).expect("sigma validated"))
        } else {
            None
        };

        let mut scratch = vec![0.0f32; cfg.feature_dim];
        for v in 0..h {
            for u in 0..w {
                let idx = v * w + u;
                let (uc, vc) = PinholeCamera::pixel_center(u, v);

                // Frame i side.
                let di = depth_i.get(u, v);
                if di.is_finite() {
                    let dir = self.cam.ray_direction(uc, vc);
                    let p_cam = dir * di as f64;
                    let mut p = p_cam * s;
                    if let Some(n) = &noise {
                        p += Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
                    }
                    if cfg.outlier_fraction > 0.0 && rng.gen::<f64>() < cfg.outlier_fraction {
                        p *= rng.gen_range(0.3..3.0);
                    }
                    pred.x_ii[idx] = p;
                    pred.c_i[idx] =
                        (cfg.base_confidence * (-di as f64 / cfg.confidence_falloff).exp()) as f32;
                    let p_world = frame_i.pose.transform_point(&p_cam);
                    lattice_feature(&p_world, &mut scratch);
                    if let Some(n) = &feat_noise {
                        for f in scratch.iter_mut() {
                            *f += n.sample(&mut rng) as f32;
                        }
                        normalize(&mut scratch);
                    }
                    pred.d_i[idx * cfg.feature_dim..(idx + 1) * cfg.feature_dim]
                        .copy_from_slice(&scratch);
                    pred.q_i[idx] = cfg.base_feat_conf;
                } else {
                    pred.q_i[idx] = 0.05;
                }

                // Frame j side, expressed in frame i's camera.
                let dj = depth_j.get(u, v);
                if dj.is_finite() {
                    let dir = self.cam.ray_direction(uc, vc);
                    let p_world = frame_j.pose.transform_point(&(dir * dj as f64));
                    let p_cam_i = t_iw.transform_point(&p_world);
                    let mut p = p_cam_i * s;
                    if let Some(n) = &noise {
                        p += Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
                    }
                    pred.x_ij[idx] = p;
                    pred.c_j[idx] =
                        (cfg.base_confidence * (-dj as f64 / cfg.confidence_falloff).exp()) as f32;
                    lattice_feature(&p_world, &mut scratch);
                    if let Some(n) = &feat_noise {
                        for f in scratch.iter_mut() {
                            *f += n.sample(&mut rng) as f32;
                        }
                        normalize(&mut scratch);
                    }
                    pred.d_j[idx * cfg.feature_dim..(idx + 1) * cfg.feature_dim]
                        .copy_from_slice(&scratch);
                    pred.q_j[idx] = cfg.base_feat_conf;
                } else {
                    pred.q_j[idx] = 0.05;
                }
            }
        }

        attenuate_confidence(&mut pred.c_i, &depth_i, &cfg.turbidity);
        attenuate_confidence(&mut pred.c_j, &depth_j, &cfg.turbidity);
        Ok(pred)
    }
}

/// Deterministic per-call seed; asymmetric in (i, j).
fn call_seed(seed: u64, id_i: u64, id_j: u64) -> u64 {
    splitmix(seed ^ splitmix(id_i.wrapping_add(0x9e37_79b9_7f4a_7c15))
        ^ splitmix(id_j.wrapping_mul(0xff51_afd7_ed55_8ccd).wrapping_add(1)))
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Lattice cell size of the descriptor field, meters.
const FEATURE_CELL: f64 = 0.03;

/// Trilinearly interpolated hashed unit vectors on a 3 cm lattice. Nearby
/// surface points (within a few millimeters) get near-identical descriptors;
/// points more than a cell apart are uncorrelated.
fn lattice_feature(p_world: &Vector3<f64>, out: &mut [f32]) {
    let g = p_world / FEATURE_CELL;
    let base = [g.x.floor(), g.y.floor(), g.z.floor()];
    let frac = [g.x - base[0], g.y - base[1], g.z - base[2]];
    out.fill(0.0);
    for corner in 0..8usize {
        let ox = corner & 1;
        let oy = (corner >> 1) & 1;
        let oz = (corner >> 2) & 1;
        let wx = if ox == 1 { frac[0] } else { 1.0 - frac[0] };
        let wy = if oy == 1 { frac[1] } else { 1.0 - frac[1] };
        let wz = if oz == 1 { frac[2] } else { 1.0 - frac[2] };
        let weight = (wx * wy * wz) as f32;
        if weight <= 0.0 {
            continue;
        }
        let h = corner_hash(
            base[0] as i64 + ox as i64,
            base[1] as i64 + oy as i64,
            base[2] as i64 + oz as i64,
        );
        for (k, o) in out.iter_mut().enumerate() {
            let r = splitmix(h.wrapping_add(k as u64));
            let val = ((r >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0;
            *o += weight * val as f32;
        }
    }
    normalize(out);
}

fn corner_hash(x: i64, y: i64, z: i64) -> u64 {
    splitmix(
        splitmix(x as u64)
            ^ splitmix((y as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
            ^ splitmix((z as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)),
    )
}

fn normalize(v: &mut [f32]) {
    let n: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointmap::{cosine_similarity, optical_depth};
    use crate::raster::ImageRgb;
    use crate::sim::FloorPlane;
    use approx::assert_abs_diff_eq;

    fn floor_scene() -> Scene {
        Scene { objects: vec![], floor: Some(FloorPlane::sediment(0.0)) }
    }

    /// Camera 1 m above the floor looking straight down; pixel (16, 12) is
    /// the principal pixel.
    fn downward_frame(id: u64) -> (PinholeCamera, FrameInput) {
        let cam = PinholeCamera::new(40.0, 40.0, 16.5, 12.5, 32, 24).unwrap();
        let pose = crate::geometry::look_at(
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::x(),
        );
        let frame = FrameInput { id, image: ImageRgb::new(32, 24).unwrap(), pose };
        (cam, frame)
    }

    #[test]
    fn clean_prediction_reproduces_geometry() {
        let (cam, frame) = downward_frame(0);
        let cfg = OracleConfig { forced_scale: Some(1.0), feature_noise: 0.0, ..Default::default() };
        let mut oracle = OracleProvider::new(floor_scene(), cam, cfg);
        let pred = oracle.predict(&frame, &frame).unwrap();
        let idx = pred.px(16, 12);
        assert_abs_diff_eq!(pred.x_ii[idx].x, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(pred.x_ii[idx].y, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(pred.x_ii[idx].z, 1.0, epsilon = 1e-6);
        // Same-image pair: no baseline, both sides identical geometry.
        assert_eq!(pred.x_ii, pred.x_ij);
    }

    #[test]
    fn forced_scale_two_doubles_points() {
        let (cam, frame) = downward_frame(0);
        let cfg = OracleConfig { forced_scale: Some(2.0), feature_noise: 0.0, ..Default::default() };
        let mut oracle = OracleProvider::new(floor_scene(), cam, cfg);
        let pred = oracle.predict(&frame, &frame).unwrap();
        let idx = pred.px(16, 12);
        assert_abs_diff_eq!(pred.x_ii[idx].z, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn clean_optical_depth_equals_ground_truth() {
        let scene = Scene::benchmark();
        let cam = PinholeCamera::new(60.0, 60.0, 32.0, 24.0, 64, 48).unwrap();
        let pose = crate::geometry::look_at(
            Vector3::new(1.0, 0.2, 0.8),
            Vector3::new(0.0, 0.0, 0.1),
            Vector3::z(),
        );
        let frame = FrameInput { id: 3, image: ImageRgb::new(64, 48).unwrap(), pose };
        let cfg = OracleConfig { forced_scale: Some(1.0), feature_noise: 0.0, ..Default::default() };
        let mut oracle = OracleProvider::new(scene.clone(), cam, cfg);
        let pred = oracle.predict(&frame, &frame).unwrap();
        let d_o = optical_depth(&pred);
        let (gt, _) = scene.raycast(&cam, &pose);
        assert_eq!(d_o.data, gt.data, "norm of clean unit-scale pointmap is the true depth");
    }

    #[test]
    fn turbidity_lowers_mean_confidence() {
        let (cam, frame) = downward_frame(0);
        let clear_cfg = OracleConfig { forced_scale: Some(1.0), ..Default::default() };
        let murky_cfg = OracleConfig {
            turbidity: TurbidityModel::new(12.0),
            ..clear_cfg.clone()
        };
        let mut clear = OracleProvider::new(floor_scene(), cam, clear_cfg);
        let mut murky = OracleProvider::new(floor_scene(), cam, murky_cfg);
        let mean = |c: &[f32]| c.iter().map(|&x| x as f64).sum::<f64>() / c.len() as f64;
        let pc = clear.predict(&frame, &frame).unwrap();
        let pm = murky.predict(&frame, &frame).unwrap();
        assert!(mean(&pm.c_i) < mean(&pc.c_i));
        // Expected ratio at ~1 m range: exp(-0.25 * 12 * 1) = 0.0498.
        let ratio = pm.c_i[pm.px(16, 12)] as f64 / pc.c_i[pc.px(16, 12)] as f64;
        assert_abs_diff_eq!(ratio, (-0.25f64 * 12.0).exp(), epsilon = 1e-4);
    }

    #[test]
    fn predictions_are_deterministic() {
        let (cam, frame_a) = downward_frame(4);
        let (_, mut frame_b) = downward_frame(9);
        frame_b.pose.translation.x += 0.05;
        let cfg = OracleConfig { noise_sigma: 0.01, ..Default::default() };
        let mut oracle = OracleProvider::new(floor_scene(), cam, cfg);
        let p1 = oracle.predict(&frame_a, &frame_b).unwrap();
        let p2 = oracle.predict(&frame_a, &frame_b).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn injected_scale_matches_output_and_varies_by_pair() {
        let (cam, frame_a) = downward_frame(4);
        let (_, mut frame_b) = downward_frame(9);
        frame_b.pose.translation.x += 0.05;
        let cfg = OracleConfig { feature_noise: 0.0, ..Default::default() };
        let mut oracle = OracleProvider::new(floor_scene(), cam, cfg);
        let s = oracle.injected_scale(4, 9);
        assert!((0.25..4.0).contains(&s));
        let pred = oracle.predict(&frame_a, &frame_b).unwrap();
        let d_o = optical_depth(&pred);
        let (gt, _) = floor_scene().raycast(&oracle.cam, &frame_a.pose);
        let idx_u = 16;
        let idx_v = 12;
        let ratio = d_o.get(idx_u, idx_v) as f64 / gt.get(idx_u, idx_v) as f64;
        assert_abs_diff_eq!(ratio, s, epsilon = 1e-5);

        let s2 = oracle.injected_scale(9, 4);
        let s3 = oracle.injected_scale(4, 10);
        assert_ne!(s, s2, "pair order draws a different scale");
        assert_ne!(s, s3);
    }

    #[test]
    fn descriptors_correlate_with_proximity() {
        let mut a = vec![0.0f32; 16];
        let mut b = vec![0.0f32; 16];
        let samples = [
            Vector3::new(0.013, -0.442, 0.051),
            Vector3::new(-0.731, 0.208, 0.002),
            Vector3::new(0.404, 0.399, 0.151),
        ];
        for p in samples {
            lattice_feature(&p, &mut a);
            lattice_feature(&(p + Vector3::new(0.002, -0.001, 0.001)), &mut b);
            assert!(
                cosine_similarity(&a, &b) > 0.9,
                "2 mm apart must stay similar at {p:?}"
            );
            lattice_feature(&(p + Vector3::new(0.9, 0.4, 0.2)), &mut b);
            assert!(
                cosine_similarity(&a, &b) < 0.6,
                "distant points must decorrelate at {p:?}"
            );
        }
    }

    #[test]
    fn cross_view_descriptors_agree() {
        // Two cameras looking at the same floor patch from different poses:
        // descriptors at corresponding pixels must pass the 0.7 gate.
        let scene = floor_scene();
        let cam = PinholeCamera::new(40.0, 40.0, 16.5, 12.5, 32, 24).unwrap();
        let pose_a = crate::geometry::look_at(
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::zeros(),
            Vector3::x(),
        );
        let pose_b = crate::geometry::look_at(
            Vector3::new(0.3, 0.1, 0.9),
            Vector3::zeros(),
            Vector3::x(),
        );
        let fa = FrameInput { id: 0, image: ImageRgb::new(32, 24).unwrap(), pose: pose_a };
        let fb = FrameInput { id: 1, image: ImageRgb::new(32, 24).unwrap(), pose: pose_b };
        let cfg = OracleConfig { forced_scale: Some(1.0), ..Default::default() };
        let mut oracle = OracleProvider::new(scene.clone(), cam, cfg);
        let pred_a = oracle.predict(&fa, &fa).unwrap();
        let pred_b = oracle.predict(&fb, &fb).unwrap();

        // Project frame-b pixel points into camera a and compare features.
        let t_aw = pose_a.invert();
        let mut checked = 0;
        let mut passed = 0;
        for v in (0..24).step_by(3) {
            for u in (0..32).step_by(3) {
                let idx_b = pred_b.px(u, v);
                let p = pred_b.x_ii[idx_b];
                if !p.z.is_finite() {
                    continue;
                }
                let p_world = pose_b.transform_point(&p);
                let p_a = t_aw.transform_point(&p_world);
                let Some((ua, va)) = cam.project(&p_a) else { continue };
                if !cam.in_bounds(ua, va) {
                    continue;
                }
                let idx_a = pred_a.px(ua as usize, va as usize);
                if !pred_a.x_ii[idx_a].z.is_finite() {
                    continue;
                }
                checked += 1;
                if cosine_similarity(pred_b.feature_i(idx_b), pred_a.feature_i(idx_a)) >= 0.7 {
                    passed += 1;
                }
            }
        }
        assert!(checked > 20);
        let rate = passed as f64 / checked as f64;
        assert!(rate > 0.8, "cross-view descriptor agreement {rate:.2}");
    }

    #[test]
    fn no_hit_pixels_are_marked() {
        // Camera looking up: nothing to see.
        let scene = floor_scene();
        let cam = PinholeCamera::new(40.0, 40.0, 16.0, 12.0, 32, 24).unwrap();
        let pose = crate::geometry::look_at(
            Vector3::new(0.0, 0.0, 0.5),
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::x(),
        );
        let frame = FrameInput { id: 0, image: ImageRgb::new(32, 24).unwrap(), pose };
        let mut oracle = OracleProvider::new(scene, cam, OracleConfig::default());
        let pred = oracle.predict(&frame, &frame).unwrap();
        assert!(pred.x_ii.iter().all(|p| p.x.is_nan()));
        assert!(pred.c_i.iter().all(|&c| c == 0.0));
        assert!(pred.q_i.iter().all(|&q| q == 0.05));
    }
}
