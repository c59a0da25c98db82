//! End-to-end reconstruction engine: initialization against the acoustic
//! grid, per-frame tracking with metric scale recovery, keyframe insertion
//! with synchronous component optimization, recovery mode, color-corrected
//! fused cloud export, and per-frame diagnostics.
//!
//! The pipeline owns all state; the pointmap provider is passed into each
//! `process_frame` call so callers can swap or reconfigure it mid-stream.
//! Provider failures skip the frame with a diagnostic note and never abort
//! the stream.

use std::fmt;
use std::time::Instant;

use nalgebra::Vector3;

use crate::acoustic::OccupancyGrid;
use crate::config::{Config, LimitsSection, Thresholds};
use crate::geometry::{PinholeCamera, RigidTransform};
use crate::graph::{
    filter_matches, keyframe_metrics, should_add_keyframe, EdgeParams, Keyframe, KeyframeGraph,
    OptimizeParams, RecoveryBuffer, RecoveryEntry,
};
use crate::pointmap::{
    match_projective, optical_depth, FrameInput, KeyframeView, MatchParams, MatchSet,
    PointmapPrediction, PointmapProvider,
};
use crate::raster::{DepthImage, ImageRgb};
use crate::scale::{
    apply_scale, filter_depth_pairs, ransac_scale, refine_scale, RansacConfig, ScaleError,
};

/// Pipeline operating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// No keyframe installed yet; each frame attempts initialization.
    Initializing,
    /// Normal operation: frames are matched against the last keyframe.
    Tracking,
    /// Match fraction collapsed; frames are matched against the best
    /// recent frame from the recovery buffer.
    Recovery,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Initializing => "initializing",
            Mode::Tracking => "tracking",
            Mode::Recovery => "recovery",
        })
    }
}

/// Per-frame record of what the pipeline did. `mode` is the mode after the
/// frame was handled, so transitions show up on the frame that caused them.
/// Scale and coverage fields are NaN when the corresponding stage did not
/// run (initialization, skipped frames).
#[derive(Debug, Clone)]
pub struct FrameDiagnostics {
    pub frame_id: u64,
    pub mode: Mode,
    /// Metric scale from acoustic consensus.
    pub s_m: f64,
    /// Cross-keyframe refinement scale.
    pub s_p: f64,
    pub alpha_match: f64,
    pub alpha_unique: f64,
    pub keyframe_added: bool,
    /// Frame contributed nothing (provider failure or malformed data).
    pub skipped: bool,
    /// Time spent inside the provider, milliseconds.
    pub provider_ms: f64,
    /// Wall time for the whole frame, provider included, milliseconds.
    pub total_ms: f64,
    /// Free-form annotation: error details, fallback notices. Empty when
    /// the frame was clean.
    pub note: String,
}

impl FrameDiagnostics {
    fn blank(frame_id: u64, mode: Mode) -> Self {
        FrameDiagnostics {
            frame_id,
            mode,
            s_m: f64::NAN,
            s_p: f64::NAN,
            alpha_match: f64::NAN,
            alpha_unique: f64::NAN,
            keyframe_added: false,
            skipped: false,
            provider_ms: 0.0,
            total_ms: 0.0,
            note: String::new(),
        }
    }

    /// One-line log form: fixed `key value` fields, with the free-form note
    /// (if any) appended last so the prefix stays machine-parseable.
    pub fn line(&self) -> String {
        let f6 = |v: f64| {
            if v.is_finite() {
                format!("{v:.6}")
            } else {
                "NaN".to_string()
            }
        };
        let mut s = format!(
            "frame {:06} mode {} s_m {} s_p {} alpha_match {} alpha_unique {} keyframe {} skipped {} provider_ms {:.3} total_ms {:.3}",
            self.frame_id,
            self.mode,
            f6(self.s_m),
            f6(self.s_p),
            f6(self.alpha_match),
            f6(self.alpha_unique),
            self.keyframe_added as u8,
            self.skipped as u8,
            self.provider_ms,
            self.total_ms,
        );
        if !self.note.is_empty() {
            s.push_str(" note ");
            s.push_str(&self.note);
        }
        s
    }
}

/// World-frame reconstruction assembled from the keyframes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusedCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[u8; 3]>,
    /// Keyframe id each point came from.
    pub source: Vec<u64>,
}

impl FusedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Single-precision arrays in file order.
    pub fn as_ply(&self) -> (Vec<[f32; 3]>, Vec<[u8; 3]>) {
        let pts = self
            .points
            .iter()
            .map(|p| [p.x as f32, p.y as f32, p.z as f32])
            .collect();
        (pts, self.colors.clone())
    }
}

/// Luminance histogram equalization with chroma preserved. The luma CDF is
/// remapped to `floor(255 * cdf / n)` and the per-pixel luma delta is added
/// to all three channels (clamped), so color differences survive exactly
/// wherever no channel saturates. An image whose luma occupies a single bin
/// is returned unchanged: the degenerate histogram carries no contrast to
/// redistribute. Applied only to output colors, never to provider input;
/// dense prediction degrades on equalized imagery.
pub fn color_correct(img: &ImageRgb) -> ImageRgb {
    let n = img.width * img.height;
    if n == 0 {
        return img.clone();
    }
    let mut hist = [0u64; 256];
    let mut luma = vec![0u8; n];
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        let y = luma8(px[0], px[1], px[2]);
        hist[y as usize] += 1;
        luma[i] = y;
    }
    if hist.iter().filter(|&&c| c > 0).count() <= 1 {
        return img.clone();
    }
    let mut map = [0u8; 256];
    let mut cum = 0u64;
    for v in 0..256 {
        cum += hist[v];
        map[v] = (255 * cum / n as u64) as u8;
    }
    let mut out = img.clone();
    for (i, px) in out.data.chunks_exact_mut(3).enumerate() {
        let y = luma[i];
        let delta = map[y as usize] as i32 - y as i32;
        for c in px {
            *c = (*c as i32 + delta).clamp(0, 255) as u8;
        }
    }
    out
}

#[inline]
fn luma8(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round() as u8
}

fn mean_conf(c: &[f32]) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    c.iter().map(|&v| v as f64).sum::<f64>() / c.len() as f64
}

/// The reconstruction engine. Construct with a camera model and a mapped
/// (or map-in-progress) occupancy grid, then feed frames in order through
/// [`Pipeline::process_frame`].
#[derive(Debug)]
pub struct Pipeline {
    cam: PinholeCamera,
    grid: OccupancyGrid,
    graph: KeyframeGraph,
    mode: Mode,
    last_keyframe_node: Option<usize>,
    /// Frame the provider pairs incoming frames with while tracking.
    reference_frame: Option<FrameInput>,
    recovery: Option<RecoveryBuffer>,
    /// Last successful acoustic scale, reused when a frame's own consensus
    /// is unavailable or unreliable.
    last_s_m: Option<f64>,
    diagnostics: Vec<FrameDiagnostics>,
    thresholds: Thresholds,
    limits: LimitsSection,
    match_params: MatchParams,
    edge_params: EdgeParams,
    opt_params: OptimizeParams,
    ransac: RansacConfig,
    /// Re-optimize every component on each keyframe insertion instead of
    /// only the affected one.
    full_graph_opt: bool,
    frames_processed: u64,
}

impl Pipeline {
    pub fn new(cfg: &Config, cam: PinholeCamera, grid: OccupancyGrid) -> Pipeline {
        let match_params = cfg.match_params();
        let edge_params = EdgeParams {
            match_params,
            tau_c: cfg.thresholds.tau_c,
            tau_q: cfg.thresholds.tau_q,
            tau_f: cfg.thresholds.tau_f,
            max_matches: cfg.limits.max_edge_matches,
        };
        let opt_params = OptimizeParams {
            w_prior: cfg.thresholds.w_prior,
            max_iterations: cfg.limits.max_optimizer_iterations,
            ..OptimizeParams::default()
        };
        Pipeline {
            cam,
            grid,
            graph: KeyframeGraph::new(),
            mode: Mode::Initializing,
            last_keyframe_node: None,
            reference_frame: None,
            recovery: None,
            last_s_m: None,
            diagnostics: Vec::new(),
            thresholds: cfg.thresholds.clone(),
            limits: cfg.limits.clone(),
            match_params,
            edge_params,
            opt_params,
            ransac: cfg.ransac_config(),
            full_graph_opt: false,
            frames_processed: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn graph(&self) -> &KeyframeGraph {
        &self.graph
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.grid
    }

    pub fn diagnostics(&self) -> &[FrameDiagnostics] {
        &self.diagnostics
    }

    pub fn frames_processed(&self) -> u64 {
        self.frames_processed
    }

    /// When set, keyframe insertion re-optimizes every component.
    pub fn set_full_graph_opt(&mut self, on: bool) {
        self.full_graph_opt = on;
    }

    /// Handles one frame according to the current mode. Never panics on
    /// provider failure; the returned diagnostics carry the outcome and are
    /// also appended to the internal log.
    pub fn process_frame(
        &mut self,
        provider: &mut dyn PointmapProvider,
        frame: FrameInput,
    ) -> FrameDiagnostics {
        let t0 = Instant::now();
        self.frames_processed += 1;
        let mut diag = FrameDiagnostics::blank(frame.id, self.mode);
        match self.mode {
            Mode::Initializing => self.step_initialize(provider, &frame, &mut diag),
            Mode::Tracking => self.step_tracking(provider, &frame, &mut diag),
            Mode::Recovery => self.step_recovery(provider, &frame, &mut diag),
        }
        diag.mode = self.mode;
        diag.total_ms = t0.elapsed().as_secs_f64() * 1e3;
        self.diagnostics.push(diag.clone());
        diag
    }

    /// Records a frame that was intentionally not processed (for example a
    /// real-time drop) so the diagnostics log stays gap-free.
    pub fn skip_frame(&mut self, frame_id: u64, note: &str) -> FrameDiagnostics {
        self.frames_processed += 1;
        let mut diag = FrameDiagnostics::blank(frame_id, self.mode);
        diag.skipped = true;
        diag.note = note.to_string();
        diag.total_ms = 0.0;
        self.diagnostics.push(diag.clone());
        diag
    }

    /// First-keyframe attempt: self-paired prediction, strict confidence
    /// gate, acoustic scale, keyframe install. Any failure leaves the
    /// pipeline in `Initializing` for the next frame to retry.
    fn step_initialize(
        &mut self,
        provider: &mut dyn PointmapProvider,
        frame: &FrameInput,
        diag: &mut FrameDiagnostics,
    ) {
        let pred = match self.predict_timed(provider, frame, frame, diag) {
            Ok(p) => p,
            Err(note) => {
                diag.skipped = true;
                diag.note = note;
                return;
            }
        };
        let max_c = pred.c_i.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        if !(max_c > self.thresholds.tau_i) {
            diag.note = format!(
                "init_confidence max {max_c:.3} not above {:.3}",
                self.thresholds.tau_i
            );
            return;
        }
        let s_m = match self.metric_scale(&pred, &frame.pose, frame.id) {
            Ok((s, _)) => s,
            Err(e) => {
                diag.note = format!("init_scale {e}");
                return;
            }
        };
        diag.s_m = s_m;
        let pred = match apply_scale(pred, s_m) {
            Ok(p) => p,
            Err(e) => {
                diag.note = format!("init_scale {e}");
                return;
            }
        };
        match self.install_keyframe(frame, &pred) {
            Ok(_) => {
                self.last_s_m = Some(s_m);
                self.mode = Mode::Tracking;
                diag.keyframe_added = true;
            }
            Err(e) => {
                diag.skipped = true;
                diag.note = e;
            }
        }
    }

    fn step_tracking(
        &mut self,
        provider: &mut dyn PointmapProvider,
        frame: &FrameInput,
        diag: &mut FrameDiagnostics,
    ) {
        let reference = self
            .reference_frame
            .clone()
            .expect("tracking mode requires a reference frame");
        let pred = match self.predict_timed(provider, frame, &reference, diag) {
            Ok(p) => p,
            Err(note) => {
                diag.skipped = true;
                diag.note = note;
                return;
            }
        };
        let s_m = self.metric_scale_or_last(&pred, frame, diag);
        let mut pred = match apply_scale(pred, s_m) {
            Ok(p) => p,
            Err(e) => {
                diag.skipped = true;
                diag.note = format!("scale_error {e}");
                return;
            }
        };

        let node = self
            .last_keyframe_node
            .expect("tracking mode requires a keyframe");
        let (raw, filtered, metrics, s_p, enter_recovery_mean);
        {
            let kf = &self.graph.nodes[node];
            let t_kf = kf.pose_kinematic.invert().compose(&frame.pose);
            raw = match_projective(
                &pred.frame_view(),
                &kf.keyframe_view(),
                &t_kf,
                &self.match_params,
            );
            filtered = filter_matches(
                &raw,
                &pred.c_i,
                &pred.q_i,
                pred.width,
                &kf.conf,
                &kf.feat_conf,
                kf.width(),
                self.thresholds.tau_c,
                self.thresholds.tau_q,
            );
            s_p = self.refined_scale(&filtered, &pred, &kf.pointmap, kf.width(), &t_kf, diag);
            metrics = keyframe_metrics(&filtered, &raw, pred.width, pred.height);
            enter_recovery_mean = mean_conf(&pred.c_i);
        }
        diag.s_p = s_p;
        if s_p != 1.0 {
            pred = apply_scale(pred, s_p).expect("refined scale is positive and finite");
        }
        diag.alpha_match = metrics.alpha_match;
        diag.alpha_unique = metrics.alpha_unique;

        if metrics.alpha_match < self.thresholds.tau_r {
            self.enter_recovery(frame, enter_recovery_mean);
            return;
        }
        if should_add_keyframe(&metrics, self.thresholds.tau_k) {
            match self.install_keyframe(frame, &pred) {
                Ok(_) => diag.keyframe_added = true,
                Err(e) => {
                    diag.skipped = true;
                    diag.note = e;
                }
            }
        }
    }

    fn step_recovery(
        &mut self,
        provider: &mut dyn PointmapProvider,
        frame: &FrameInput,
        diag: &mut FrameDiagnostics,
    ) {
        let entry = self
            .recovery
            .as_ref()
            .expect("recovery mode requires a buffer")
            .reference();
        let pred = match self.predict_timed(provider, frame, &entry.frame, diag) {
            Ok(p) => p,
            Err(note) => {
                diag.skipped = true;
                diag.note = note;
                return;
            }
        };
        let s_m = self.metric_scale_or_last(&pred, frame, diag);
        let mut pred = match apply_scale(pred, s_m) {
            Ok(p) => p,
            Err(e) => {
                diag.skipped = true;
                diag.note = format!("scale_error {e}");
                return;
            }
        };

        // The reference is a raw frame, not a keyframe; its geometry comes
        // from the prediction's own second-image arrays, moved into the
        // reference camera via the kinematic relative pose.
        let t_rf = entry.frame.pose.invert().compose(&frame.pose);
        let ref_points: Vec<Vector3<f64>> = pred
            .x_ij
            .iter()
            .map(|p| t_rf.transform_point(p))
            .collect();
        let view = KeyframeView {
            cam: &self.cam,
            points: &ref_points,
            conf: &pred.c_j,
            features: &pred.d_j,
            feat_conf: &pred.q_j,
            dim: pred.dim,
        };
        let raw = match_projective(&pred.frame_view(), &view, &t_rf, &self.match_params);
        let filtered = filter_matches(
            &raw,
            &pred.c_i,
            &pred.q_i,
            pred.width,
            &pred.c_j,
            &pred.q_j,
            pred.width,
            self.thresholds.tau_c,
            self.thresholds.tau_q,
        );
        let s_p = self.refined_scale(&filtered, &pred, &ref_points, pred.width, &t_rf, diag);
        let metrics = keyframe_metrics(&filtered, &raw, pred.width, pred.height);
        diag.s_p = s_p;
        diag.alpha_match = metrics.alpha_match;
        diag.alpha_unique = metrics.alpha_unique;
        let frame_mean = mean_conf(&pred.c_i);
        if s_p != 1.0 {
            pred = apply_scale(pred, s_p).expect("refined scale is positive and finite");
        }

        // Exit once a frame matches the reference as well as tracking
        // requires of a keyframe; that frame becomes the new keyframe.
        if metrics.alpha_match >= self.thresholds.tau_k {
            match self.install_keyframe(frame, &pred) {
                Ok(_) => {
                    diag.keyframe_added = true;
                    self.mode = Mode::Tracking;
                    self.recovery = None;
                }
                Err(e) => {
                    diag.skipped = true;
                    diag.note = e;
                }
            }
        } else {
            self.recovery
                .as_mut()
                .expect("recovery mode requires a buffer")
                .push(frame.clone(), frame_mean);
        }
    }

    fn enter_recovery(&mut self, frame: &FrameInput, frame_mean_conf: f64) {
        let node = self
            .last_keyframe_node
            .expect("recovery is entered from tracking");
        let kf = &self.graph.nodes[node];
        let seed = RecoveryEntry {
            frame: FrameInput {
                id: kf.id,
                image: kf.image.clone(),
                pose: kf.pose_kinematic,
            },
            mean_conf: kf.mean_conf,
        };
        let mut buf = RecoveryBuffer::new(seed);
        buf.push(frame.clone(), frame_mean_conf);
        self.recovery = Some(buf);
        self.mode = Mode::Recovery;
    }

    fn predict_timed(
        &self,
        provider: &mut dyn PointmapProvider,
        frame: &FrameInput,
        reference: &FrameInput,
        diag: &mut FrameDiagnostics,
    ) -> Result<PointmapPrediction, String> {
        let t = Instant::now();
        let r = provider.predict(frame, reference);
        diag.provider_ms = t.elapsed().as_secs_f64() * 1e3;
        match r {
            Ok(p) if p.width != self.cam.width || p.height != self.cam.height => Err(format!(
                "provider_error prediction {}x{} does not match camera {}x{}",
                p.width, p.height, self.cam.width, self.cam.height
            )),
            Ok(p) => Ok(p),
            Err(e) => Err(format!("provider_error {e}")),
        }
    }

    /// Acoustic metric scale for one frame: optical depths from the
    /// prediction against grid depths cast at the kinematic pose.
    fn metric_scale(
        &self,
        pred: &PointmapPrediction,
        pose: &RigidTransform,
        frame_id: u64,
    ) -> Result<(f64, usize), ScaleError> {
        let d_opt = optical_depth(pred);
        let d_ac = self.acoustic_depth_sparse(pose);
        let pairs = filter_depth_pairs(&d_opt, &d_ac, &pred.c_i)
            .subsample(self.limits.max_depth_pairs);
        ransac_scale(&pairs, &self.frame_ransac(frame_id))
    }

    /// Tracking-time scale: falls back to the last successful value when
    /// this frame's consensus fails, noting the fallback in the diagnostics.
    fn metric_scale_or_last(
        &mut self,
        pred: &PointmapPrediction,
        frame: &FrameInput,
        diag: &mut FrameDiagnostics,
    ) -> f64 {
        match self.metric_scale(pred, &frame.pose, frame.id) {
            Ok((s, _)) => {
                self.last_s_m = Some(s);
                diag.s_m = s;
                s
            }
            Err(e) => {
                let s = self
                    .last_s_m
                    .expect("tracking and recovery always follow a scaled initialization");
                diag.s_m = s;
                diag.note = format!("scale_fallback {e}");
                s
            }
        }
    }

    /// Least-squares scale against the matched reference points; identity
    /// on degenerate or empty match sets (noted in the diagnostics).
    fn refined_scale(
        &self,
        filtered: &MatchSet,
        pred: &PointmapPrediction,
        ref_points: &[Vector3<f64>],
        ref_width: usize,
        t_kf: &RigidTransform,
        diag: &mut FrameDiagnostics,
    ) -> f64 {
        let mut pts_f = Vec::with_capacity(filtered.len());
        let mut pts_k = Vec::with_capacity(filtered.len());
        for &((uf, vf), (uk, vk)) in &filtered.pairs {
            let fi = vf as usize * pred.width + uf as usize;
            let ki = vk as usize * ref_width + uk as usize;
            pts_f.push(pred.x_ii[fi]);
            pts_k.push(ref_points[ki]);
        }
        match refine_scale(&pts_k, &pts_f, t_kf) {
            Ok(s) if s > 0.0 && s.is_finite() => s,
            Ok(s) => {
                diag.note = format!("refine_degenerate scale {s}");
                1.0
            }
            Err(e) => {
                diag.note = format!("refine_degenerate {e}");
                1.0
            }
        }
    }

    /// Depth image from the occupancy grid at a subsampled pixel set. The
    /// stride keeps the cast count at or below the depth-pair limit; pixels
    /// off the stride stay invalid and are ignored by the pair filter.
    fn acoustic_depth_sparse(&self, pose_wc: &RigidTransform) -> DepthImage {
        let n = self.cam.width * self.cam.height;
        let stride = n.div_ceil(self.limits.max_depth_pairs.max(1)).max(1);
        let mut img = DepthImage::new_invalid(self.cam.width, self.cam.height)
            .expect("camera dims are validated");
        let origin = pose_wc.translation;
        let max_range = self.grid.diagonal();
        let mut i = 0;
        while i < n {
            let (u, v) = (i % self.cam.width, i / self.cam.width);
            let (uc, vc) = PinholeCamera::pixel_center(u, v);
            let dir_w = pose_wc.rotation * self.cam.ray_direction(uc, vc);
            if let Some(d) = self.grid.cast_depth(&origin, &dir_w, max_range) {
                img.data[i] = d as f32;
            }
            i += stride;
        }
        img
    }

    fn frame_ransac(&self, frame_id: u64) -> RansacConfig {
        RansacConfig {
            seed: self.ransac.seed ^ frame_id.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..self.ransac
        }
    }

    /// Installs a metric prediction as a keyframe, builds covisibility
    /// edges, and synchronously optimizes and world-aligns the affected
    /// component (all components under full-graph mode).
    fn install_keyframe(
        &mut self,
        frame: &FrameInput,
        pred: &PointmapPrediction,
    ) -> Result<usize, String> {
        let kf = Keyframe::from_prediction(
            frame.id,
            frame.image.clone(),
            frame.pose,
            self.cam,
            pred,
        )
        .map_err(|e| format!("keyframe_error {e}"))?;
        let node = self.graph.add_keyframe_and_edges(kf, &self.edge_params);
        if self.full_graph_opt {
            for c in 0..self.graph.component_count() {
                self.optimize_and_align(c);
            }
        } else {
            self.optimize_and_align(self.graph.component_of(node));
        }
        self.last_keyframe_node = Some(node);
        self.reference_frame = Some(frame.clone());
        Ok(node)
    }

    fn optimize_and_align(&mut self, component: usize) {
        self.graph
            .optimize_component(component, &self.opt_params)
            .expect("component exists by construction");
        self.graph
            .align_component_to_world(component)
            .expect("component exists by construction");
    }

    /// Concatenated world-frame keyframe pointmaps at their optimized,
    /// world-aligned poses. Colors come from the color-corrected keyframe
    /// images; only finite points whose confidence strictly exceeds the
    /// export threshold are emitted. Empty when no keyframe exists.
    pub fn export_cloud(&self) -> FusedCloud {
        let mut cloud = FusedCloud::default();
        for kf in &self.graph.nodes {
            let corrected = color_correct(&kf.image);
            let w = kf.width();
            for (i, p) in kf.pointmap.iter().enumerate() {
                if !((kf.conf[i] as f64) > self.thresholds.tau_c) {
                    continue;
                }
                if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                    continue;
                }
                cloud.points.push(kf.pose.transform_point(p));
                cloud.colors.push(corrected.get(i % w, i / w));
                cloud.source.push(kf.id);
            }
        }
        cloud
    }
}
