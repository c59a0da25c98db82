//! Keyframe graph: covisibility edges, joint pose-and-scale refinement, and
//! alignment of refined components back to the kinematic world frame.
//!
//! Keyframes store metric camera-frame pointmaps. Edges carry subsampled
//! pixel-to-pixel matches between keyframes and are created when the match
//! fraction clears a threshold. Connected components are optimized
//! independently: a Gauss-Newton pass over each keyframe's 6-DOF pose and a
//! 1-DOF log-scale, with a prior anchoring poses to their kinematic
//! measurements. A recovery buffer of recent frames supports re-localization
//! after tracking drops out.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, SMatrix, SVector, Vector3};
use thiserror::Error;

use crate::geometry::{PinholeCamera, RigidTransform};
use crate::pointmap::{
    match_projective, FrameInput, FrameView, KeyframeView, MatchParams, MatchSet,
    PointmapPrediction,
};
use crate::raster::ImageRgb;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("alignment needs at least one pose pair")]
    EmptyAlignment,
    #[error("alignment pose counts differ: {measured} measured vs {optimized} optimized")]
    AlignmentLengthMismatch { measured: usize, optimized: usize },
    #[error("component {0} has no keyframes")]
    UnknownComponent(usize),
    #[error("prediction dimensions do not match the camera")]
    DimensionMismatch,
}

/// Coverage threshold below which a frame is promoted to a keyframe.
pub const DEFAULT_TAU_K: f64 = 0.3;
/// Minimum match fraction for a covisibility edge.
pub const DEFAULT_TAU_F: f64 = 0.05;
/// Confidence gate applied to both sides of a match.
pub const DEFAULT_TAU_C: f64 = 1.5;
/// Feature-reliability gate on the geometric mean of the two Q values.
pub const DEFAULT_TAU_Q: f64 = 0.5;
/// Pose-prior weight in the component optimizer.
pub const DEFAULT_W_PRIOR: f64 = 10.0;
/// Recovery buffer capacity.
pub const RECOVERY_BUFFER_CAP: usize = 10;
/// Cap on stored matches per edge; keeps the optimizer cost bounded.
pub const MAX_EDGE_MATCHES: usize = 1500;

/// One node of the graph: the frame image, its kinematic pose, the metric
/// pointmap at promotion time, and the per-pixel confidence and descriptor
/// arrays needed to match later frames against it.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: u64,
    pub image: ImageRgb,
    /// Current pose estimate; starts at the kinematic measurement and is
    /// updated by optimization and alignment.
    pub pose: RigidTransform,
    /// Kinematic measurement, kept fixed as the optimizer's prior anchor.
    pub pose_kinematic: RigidTransform,
    /// Metric camera-frame points, row-major; invalid pixels are NaN.
    pub pointmap: Vec<Vector3<f64>>,
    pub conf: Vec<f32>,
    pub features: Vec<f32>,
    pub feat_conf: Vec<f32>,
    pub dim: usize,
    pub cam: PinholeCamera,
    pub mean_conf: f64,
    /// Cumulative scale correction folded into `pointmap` by optimization.
    pub scale: f64,
}

impl Keyframe {
    /// Builds a keyframe from the frame-side arrays of a metric prediction.
    pub fn from_prediction(
        id: u64,
        image: ImageRgb,
        pose: RigidTransform,
        cam: PinholeCamera,
        pred: &PointmapPrediction,
    ) -> Result<Self, GraphError> {
        if pred.width != cam.width || pred.height != cam.height {
            return Err(GraphError::DimensionMismatch);
        }
        let n = pred.width * pred.height;
        let mean_conf = pred.c_i.iter().map(|&c| c as f64).sum::<f64>() / n as f64;
        Ok(Keyframe {
            id,
            image,
            pose,
            pose_kinematic: pose,
            pointmap: pred.x_ii.clone(),
            conf: pred.c_i.clone(),
            features: pred.d_i.clone(),
            feat_conf: pred.q_i.clone(),
            dim: pred.dim,
            cam,
            mean_conf,
            scale: 1.0,
        })
    }

    pub fn width(&self) -> usize {
        self.cam.width
    }

    pub fn height(&self) -> usize {
        self.cam.height
    }

    /// Keyframe-side view for projective matching.
    pub fn keyframe_view(&self) -> KeyframeView<'_> {
        KeyframeView {
            cam: &self.cam,
            points: &self.pointmap,
            conf: &self.conf,
            features: &self.features,
            feat_conf: &self.feat_conf,
            dim: self.dim,
        }
    }

    /// Frame-side view, used when matching this keyframe against another.
    pub fn frame_view(&self) -> FrameView<'_> {
        FrameView {
            width: self.cam.width,
            height: self.cam.height,
            points: &self.pointmap,
            features: &self.features,
            dim: self.dim,
        }
    }

    /// Valid points transformed into the world frame, paired with the pixel
    /// color, for cloud export.
    pub fn world_points_colored(&self) -> Vec<(Vector3<f64>, [u8; 3])> {
        let mut out = Vec::new();
        for v in 0..self.height() {
            for u in 0..self.width() {
                let p = self.pointmap[v * self.width() + u];
                if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                    continue;
                }
                out.push((self.pose.transform_point(&p), self.image.get(u, v)));
            }
        }
        out
    }
}

/// Covisibility edge. `a` is the node that was matched as the frame side,
/// `b` the node matched as the keyframe side; `matches` holds row-major
/// pixel indices (a-side, b-side), subsampled to [`MAX_EDGE_MATCHES`].
#[derive(Debug, Clone)]
pub struct GraphEdge {
    pub a: usize,
    pub b: usize,
    pub fraction: f64,
    pub matches: Vec<(u32, u32)>,
}

/// Gates applied when inserting a keyframe and forming its edges.
#[derive(Debug, Clone)]
pub struct EdgeParams {
    pub match_params: MatchParams,
    pub tau_c: f64,
    pub tau_q: f64,
    pub tau_f: f64,
    pub max_matches: usize,
}

impl Default for EdgeParams {
    fn default() -> Self {
        EdgeParams {
            match_params: MatchParams::default(),
            tau_c: DEFAULT_TAU_C,
            tau_q: DEFAULT_TAU_Q,
            tau_f: DEFAULT_TAU_F,
            max_matches: MAX_EDGE_MATCHES,
        }
    }
}

/// Keeps only matches whose confidences clear `tau_c` on both sides and
/// whose feature reliabilities satisfy sqrt(q_f * q_k) > `tau_q`. All three
/// comparisons are strict, so a value exactly at a threshold is dropped.
#[allow(clippy::too_many_arguments)]
pub fn filter_matches(
    m: &MatchSet,
    c_f: &[f32],
    q_f: &[f32],
    w_f: usize,
    c_k: &[f32],
    q_k: &[f32],
    w_k: usize,
    tau_c: f64,
    tau_q: f64,
) -> MatchSet {
    let mut pairs = Vec::with_capacity(m.pairs.len());
    for &((uf, vf), (uk, vk)) in &m.pairs {
        let fi = vf as usize * w_f + uf as usize;
        let ki = vk as usize * w_k + uk as usize;
        if (c_f[fi] as f64) <= tau_c || (c_k[ki] as f64) <= tau_c {
            continue;
        }
        let q = (q_f[fi] as f64 * q_k[ki] as f64).sqrt();
        if q <= tau_q {
            continue;
        }
        pairs.push(((uf, vf), (uk, vk)));
    }
    MatchSet { pairs }
}

/// Coverage metrics deciding keyframe promotion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeMetrics {
    /// Filtered matches over the frame pixel count.
    pub alpha_match: f64,
    /// Distinct keyframe pixels hit by the raw matches, over the pixel count.
    pub alpha_unique: f64,
}

pub fn keyframe_metrics(
    filtered: &MatchSet,
    raw: &MatchSet,
    width: usize,
    height: usize,
) -> KeyframeMetrics {
    let n = (width * height) as f64;
    KeyframeMetrics {
        alpha_match: filtered.len() as f64 / n,
        alpha_unique: raw.unique_keyframe_pixels() as f64 / n,
    }
}

/// A frame becomes a keyframe when either coverage metric drops strictly
/// below `tau_k`; at exactly the threshold tracking continues.
pub fn should_add_keyframe(metrics: &KeyframeMetrics, tau_k: f64) -> bool {
    metrics.alpha_match.min(metrics.alpha_unique) < tau_k
}

/// The keyframe graph. Nodes are insertion-ordered; components are kept
/// consistent with the edge set after every insertion.
#[derive(Debug, Clone, Default)]
pub struct KeyframeGraph {
    pub nodes: Vec<Keyframe>,
    pub edges: Vec<GraphEdge>,
    component_of: Vec<usize>,
}

impl KeyframeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn component_of(&self, node: usize) -> usize {
        self.component_of[node]
    }

    pub fn component_count(&self) -> usize {
        self.component_of.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Partition of node indices; component ids are assigned in order of
    /// each component's first node, so the result is deterministic.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); self.component_count()];
        for (n, &c) in self.component_of.iter().enumerate() {
            out[c].push(n);
        }
        out
    }

    /// Inserts a keyframe without attempting any edges.
    pub fn add_keyframe(&mut self, kf: Keyframe) -> usize {
        self.nodes.push(kf);
        self.recompute_components();
        self.nodes.len() - 1
    }

    /// Inserts an edge built outside the projective matcher, e.g. from
    /// synthetic correspondences. Components are updated.
    pub fn add_edge_raw(&mut self, a: usize, b: usize, fraction: f64, matches: Vec<(u32, u32)>) {
        assert!(a < self.nodes.len() && b < self.nodes.len() && a != b);
        self.edges.push(GraphEdge { a, b, fraction, matches });
        self.recompute_components();
    }

    /// Inserts `kf` and matches it against every existing keyframe. An edge
    /// is created when the filtered match fraction strictly exceeds
    /// `params.tau_f`. Returns the new node index.
    pub fn add_keyframe_and_edges(&mut self, kf: Keyframe, params: &EdgeParams) -> usize {
        let n_px = (kf.width() * kf.height()) as f64;
        let mut new_edges = Vec::new();
        for (b, other) in self.nodes.iter().enumerate() {
            let t_kf = other.pose.invert().compose(&kf.pose);
            let raw = match_projective(
                &kf.frame_view(),
                &other.keyframe_view(),
                &t_kf,
                &params.match_params,
            );
            let filtered = filter_matches(
                &raw,
                &kf.conf,
                &kf.feat_conf,
                kf.width(),
                &other.conf,
                &other.feat_conf,
                other.width(),
                params.tau_c,
                params.tau_q,
            );
            let fraction = filtered.len() as f64 / n_px;
            if fraction > params.tau_f {
                let matches = subsample_matches(&filtered, kf.width(), other.width(), params.max_matches);
                new_edges.push((b, fraction, matches));
            }
        }
        self.nodes.push(kf);
        let a = self.nodes.len() - 1;
        for (b, fraction, matches) in new_edges {
            self.edges.push(GraphEdge { a, b, fraction, matches });
        }
        self.recompute_components();
        a
    }

    fn recompute_components(&mut self) {
        let n = self.nodes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for e in &self.edges {
            let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut ids = vec![usize::MAX; n];
        let mut next = 0;
        for x in 0..n {
            let r = find(&mut parent, x);
            if ids[r] == usize::MAX {
                ids[r] = next;
                next += 1;
            }
            ids[x] = ids[r];
        }
        self.component_of = ids;
    }

    /// Jointly refines the poses and per-keyframe scales of one component.
    /// Match residuals are point-to-point distances in the world frame; the
    /// prior anchors each pose to its kinematic measurement and each
    /// log-scale to zero (pointmaps enter already metric), both weighted by
    /// `w_prior`. Singleton components are returned unchanged. The accepted
    /// iterates never increase the total cost; if the iteration budget runs
    /// out while the cost is still falling, the best iterate is kept and the
    /// report's `converged` flag is false.
    pub fn optimize_component(
        &mut self,
        component: usize,
        params: &OptimizeParams,
    ) -> Result<OptimizeReport, GraphError> {
        let members: Vec<usize> = (0..self.nodes.len())
            .filter(|&n| self.component_of[n] == component)
            .collect();
        if members.is_empty() {
            return Err(GraphError::UnknownComponent(component));
        }
        if members.len() == 1 {
            let node = &self.nodes[members[0]];
            let r = prior_residual(&node.pose, &node.pose_kinematic);
            let cost = params.w_prior * r.norm_squared();
            return Ok(OptimizeReport {
                converged: true,
                initial_cost: cost,
                final_cost: cost,
                iterations: 0,
            });
        }

        let mut local = vec![usize::MAX; self.nodes.len()];
        for (l, &g) in members.iter().enumerate() {
            local[g] = l;
        }
        let comp_edges: Vec<&GraphEdge> = self
            .edges
            .iter()
            .filter(|e| self.component_of[e.a] == component)
            .collect();

        let mut state: Vec<(RigidTransform, f64)> =
            members.iter().map(|&g| (self.nodes[g].pose, 0.0)).collect();
        let kin: Vec<RigidTransform> =
            members.iter().map(|&g| self.nodes[g].pose_kinematic).collect();
        let points: Vec<&[Vector3<f64>]> =
            members.iter().map(|&g| self.nodes[g].pointmap.as_slice()).collect();

        let eval = |st: &[(RigidTransform, f64)]| -> f64 {
            let mut cost = 0.0;
            for e in &comp_edges {
                let (la, lb) = (local[e.a], local[e.b]);
                let (ta, sa) = (&st[la].0, st[la].1.exp());
                let (tb, sb) = (&st[lb].0, st[lb].1.exp());
                for &(ia, ib) in &e.matches {
                    let pa = ta.transform_point(&(points[la][ia as usize] * sa));
                    let pb = tb.transform_point(&(points[lb][ib as usize] * sb));
                    cost += (pa - pb).norm_squared();
                }
            }
            for (l, (pose, sigma)) in st.iter().enumerate() {
                cost += params.w_prior
                    * (prior_residual(pose, &kin[l]).norm_squared() + sigma * sigma);
            }
            cost
        };

        let mut cost = eval(&state);
        let initial_cost = cost;
        let dim = 7 * members.len();
        let mut converged = false;
        let mut iterations = 0;

        for _ in 0..params.max_iterations {
            let mut h = DMatrix::<f64>::zeros(dim, dim);
            let mut g = DVector::<f64>::zeros(dim);

            for e in &comp_edges {
                let (la, lb) = (local[e.a], local[e.b]);
                let (ta, sa) = (state[la].0, state[la].1.exp());
                let (tb, sb) = (state[lb].0, state[lb].1.exp());
                for &(ia, ib) in &e.matches {
                    let pa_w = ta.transform_point(&(points[la][ia as usize] * sa));
                    let pb_w = tb.transform_point(&(points[lb][ib as usize] * sb));
                    let r = pa_w - pb_w;
                    let ja = match_jacobian(&pa_w, &ta.translation, 1.0);
                    let jb = match_jacobian(&pb_w, &tb.translation, -1.0);
                    accumulate(&mut h, &mut g, la, la, &ja, &ja);
                    accumulate(&mut h, &mut g, la, lb, &ja, &jb);
                    accumulate(&mut h, &mut g, lb, lb, &jb, &jb);
                    accumulate(&mut h, &mut g, lb, la, &jb, &ja);
                    let gta = ja.transpose() * r;
                    let gtb = jb.transpose() * r;
                    for k in 0..7 {
                        g[7 * la + k] += gta[k];
                        g[7 * lb + k] += gtb[k];
                    }
                }
            }
            for (l, (pose, sigma)) in state.iter().enumerate() {
                let (jp, rp) = prior_jacobian(pose, &kin[l]);
                let hp = jp.transpose() * jp * params.w_prior;
                let gp = jp.transpose() * rp * params.w_prior;
                for i in 0..6 {
                    for j in 0..6 {
                        h[(7 * l + i, 7 * l + j)] += hp[(i, j)];
                    }
                    g[7 * l + i] += gp[i];
                }
                h[(7 * l + 6, 7 * l + 6)] += params.w_prior;
                g[7 * l + 6] += params.w_prior * sigma;
            }

            let Some(delta) = solve_normal_equations(&h, &g) else {
                break;
            };

            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..12 {
                let cand = apply_step(&state, &delta, alpha);
                let c2 = eval(&cand);
                if c2.is_finite() && c2 < cost {
                    let drop = cost - c2;
                    state = cand;
                    cost = c2;
                    accepted = true;
                    iterations += 1;
                    if drop <= params.cost_tolerance * cost.max(1e-30) {
                        converged = true;
                    }
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                converged = true;
                break;
            }
            if converged {
                break;
            }
        }

        for (l, &gidx) in members.iter().enumerate() {
            let node = &mut self.nodes[gidx];
            node.pose = state[l].0;
            let s = state[l].1.exp();
            if (s - 1.0).abs() > f64::EPSILON {
                for p in &mut node.pointmap {
                    *p *= s;
                }
                node.scale *= s;
            }
        }

        Ok(OptimizeReport { converged, initial_cost, final_cost: cost, iterations })
    }

    /// Estimates the world-alignment transform of one component from its
    /// kinematic and optimized poses, then left-applies it to the
    /// component's pose estimates. Returns the transform.
    pub fn align_component_to_world(&mut self, component: usize) -> Result<RigidTransform, GraphError> {
        let members: Vec<usize> = (0..self.nodes.len())
            .filter(|&n| self.component_of[n] == component)
            .collect();
        if members.is_empty() {
            return Err(GraphError::UnknownComponent(component));
        }
        let measured: Vec<RigidTransform> =
            members.iter().map(|&n| self.nodes[n].pose_kinematic).collect();
        let optimized: Vec<RigidTransform> = members.iter().map(|&n| self.nodes[n].pose).collect();
        let x = align_to_world(&measured, &optimized)?;
        for &n in &members {
            self.nodes[n].pose = x.compose(&self.nodes[n].pose);
        }
        Ok(x)
    }

    /// Line-oriented text dump: a header, one line per keyframe with its
    /// component, folded scale, and pose, then one line per edge.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "keyframes {}", self.nodes.len());
        let _ = writeln!(s, "edges {}", self.edges.len());
        for (n, kf) in self.nodes.iter().enumerate() {
            let (t, qx, qy, qz, qw) = kf.pose.to_quaternion();
            let _ = writeln!(
                s,
                "keyframe {} component {} scale {:.6} pose {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                kf.id, self.component_of[n], kf.scale, t.x, t.y, t.z, qx, qy, qz, qw
            );
        }
        for e in &self.edges {
            let _ = writeln!(
                s,
                "edge {} {} fraction {:.6} matches {}",
                self.nodes[e.a].id, self.nodes[e.b].id, e.fraction, e.matches.len()
            );
        }
        s
    }
}

fn subsample_matches(m: &MatchSet, w_a: usize, w_b: usize, max: usize) -> Vec<(u32, u32)> {
    let stride = if m.len() > max { m.len().div_ceil(max) } else { 1 };
    m.pairs
        .iter()
        .step_by(stride)
        .map(|&((uf, vf), (uk, vk))| {
            ((vf as usize * w_a + uf as usize) as u32, (vk as usize * w_b + uk as usize) as u32)
        })
        .collect()
}

/// Gauss-Newton settings for [`KeyframeGraph::optimize_component`].
#[derive(Debug, Clone)]
pub struct OptimizeParams {
    pub w_prior: f64,
    pub max_iterations: usize,
    /// Relative cost decrease below which the solve is declared converged.
    pub cost_tolerance: f64,
}

impl Default for OptimizeParams {
    fn default() -> Self {
        OptimizeParams { w_prior: DEFAULT_W_PRIOR, max_iterations: 15, cost_tolerance: 1e-10 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizeReport {
    pub converged: bool,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Jacobian of `sign * (pose . (exp(sigma) p))` with respect to the node's
/// local step [dt, dtheta, dsigma], evaluated at the world point `p_w`.
fn match_jacobian(p_w: &Vector3<f64>, t: &Vector3<f64>, sign: f64) -> SMatrix<f64, 3, 7> {
    let mut j = SMatrix::<f64, 3, 7>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(Matrix3::identity() * sign));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(p_w) * sign));
    j.fixed_view_mut::<3, 1>(0, 6).copy_from(&((p_w - t) * sign));
    j
}

fn accumulate(
    h: &mut DMatrix<f64>,
    _g: &mut DVector<f64>,
    la: usize,
    lb: usize,
    ja: &SMatrix<f64, 3, 7>,
    jb: &SMatrix<f64, 3, 7>,
) {
    let block = ja.transpose() * jb;
    for i in 0..7 {
        for j in 0..7 {
            h[(7 * la + i, 7 * lb + j)] += block[(i, j)];
        }
    }
}

/// Six-dimensional pose-prior residual: translation difference stacked on
/// the rotation log of `pose` relative to `kin`.
fn prior_residual(pose: &RigidTransform, kin: &RigidTransform) -> SVector<f64, 6> {
    let dt = pose.translation - kin.translation;
    let rel = pose.rotation * kin.rotation.transpose();
    let axis = Rotation3::from_matrix(&rel).scaled_axis();
    SVector::<f64, 6>::from_iterator([dt.x, dt.y, dt.z, axis.x, axis.y, axis.z])
}

/// Central-difference Jacobian of the prior residual over the 6 pose axes.
fn prior_jacobian(
    pose: &RigidTransform,
    kin: &RigidTransform,
) -> (SMatrix<f64, 6, 6>, SVector<f64, 6>) {
    let r0 = prior_residual(pose, kin);
    let h = 1e-6;
    let mut j = SMatrix::<f64, 6, 6>::zeros();
    for k in 0..6 {
        let mut dp = [0.0; 6];
        dp[k] = h;
        let rp = prior_residual(&perturb_pose(pose, &dp), kin);
        dp[k] = -h;
        let rm = prior_residual(&perturb_pose(pose, &dp), kin);
        let col = (rp - rm) / (2.0 * h);
        j.set_column(k, &col);
    }
    (j, r0)
}

fn perturb_pose(pose: &RigidTransform, d: &[f64; 6]) -> RigidTransform {
    let rot = Rotation3::from_scaled_axis(Vector3::new(d[3], d[4], d[5]));
    let delta = RigidTransform::new(rot.into_inner(), Vector3::new(d[0], d[1], d[2]));
    delta.compose(pose)
}

fn apply_step(
    state: &[(RigidTransform, f64)],
    delta: &DVector<f64>,
    alpha: f64,
) -> Vec<(RigidTransform, f64)> {
    state
        .iter()
        .enumerate()
        .map(|(l, (pose, sigma))| {
            let o = 7 * l;
            let d = [
                delta[o] * alpha,
                delta[o + 1] * alpha,
                delta[o + 2] * alpha,
                delta[o + 3] * alpha,
                delta[o + 4] * alpha,
                delta[o + 5] * alpha,
            ];
            (perturb_pose(pose, &d), sigma + delta[o + 6] * alpha)
        })
        .collect()
}

/// Solves `h x = -g`, escalating diagonal damping if the plain system is
/// not positive definite. Returns None when no damping level works.
fn solve_normal_equations(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let max_diag = (0..h.nrows()).map(|i| h[(i, i)].abs()).fold(0.0_f64, f64::max).max(1e-30);
    let mut damping = 0.0;
    for _ in 0..8 {
        let mut hd = h.clone();
        for i in 0..hd.nrows() {
            hd[(i, i)] += damping + 1e-12 * max_diag;
        }
        if let Some(ch) = hd.cholesky() {
            return Some(ch.solve(&(-g)));
        }
        damping = if damping == 0.0 { 1e-9 * max_diag } else { damping * 100.0 };
    }
    None
}

/// Rigid transform X such that measured ~= X . optimized, estimated by
/// Procrustes alignment of the centered pose translations. When the
/// translations are degenerate (fewer than three poses, or collinear), the
/// rotation falls back to averaging the per-pose relative rotations.
pub fn align_to_world(
    measured: &[RigidTransform],
    optimized: &[RigidTransform],
) -> Result<RigidTransform, GraphError> {
    if measured.len() != optimized.len() {
        return Err(GraphError::AlignmentLengthMismatch {
            measured: measured.len(),
            optimized: optimized.len(),
        });
    }
    if measured.is_empty() {
        return Err(GraphError::EmptyAlignment);
    }
    let n = measured.len() as f64;
    let cm: Vector3<f64> = measured.iter().map(|t| t.translation).sum::<Vector3<f64>>() / n;
    let co: Vector3<f64> = optimized.iter().map(|t| t.translation).sum::<Vector3<f64>>() / n;

    let mut cross = Matrix3::<f64>::zeros();
    for (m, o) in measured.iter().zip(optimized) {
        cross += (o.translation - co) * (m.translation - cm).transpose();
    }
    let svd = cross.svd(true, true);
    let degenerate = measured.len() < 3
        || svd.singular_values[0] < 1e-12
        || svd.singular_values[1] <= 1e-9 * svd.singular_values[0];

    let rotation = if degenerate {
        average_relative_rotation(measured, optimized)
    } else {
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let v = vt.transpose();
        let d = (v * u.transpose()).determinant().signum();
        v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose()
    };
    let translation = cm - rotation * co;
    Ok(RigidTransform::new(rotation, translation))
}

/// Chordal mean of the per-pose relative rotations, projected to SO(3).
fn average_relative_rotation(
    measured: &[RigidTransform],
    optimized: &[RigidTransform],
) -> Matrix3<f64> {
    let mut m = Matrix3::<f64>::zeros();
    for (a, b) in measured.iter().zip(optimized) {
        m += a.rotation * b.rotation.transpose();
    }
    let svd = m.svd(true, true);
    if svd.singular_values[2] < 1e-12 && svd.singular_values[0] < 1e-12 {
        return Matrix3::identity();
    }
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let d = (u * vt).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt
}

/// One buffered candidate for re-localization.
#[derive(Debug, Clone)]
pub struct RecoveryEntry {
    pub frame: FrameInput,
    pub mean_conf: f64,
}

/// Bounded buffer of recent frames, consulted while tracking is lost. It is
/// seeded with the last keyframe so recovery always has a reference.
#[derive(Debug, Clone)]
pub struct RecoveryBuffer {
    entries: VecDeque<RecoveryEntry>,
}

impl RecoveryBuffer {
    pub fn new(seed: RecoveryEntry) -> Self {
        let mut entries = VecDeque::with_capacity(RECOVERY_BUFFER_CAP + 1);
        entries.push_back(seed);
        RecoveryBuffer { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &RecoveryEntry> {
        self.entries.iter()
    }

    /// The buffered entry with the highest mean confidence (most recent on
    /// ties), used as the matching reference for an incoming frame.
    pub fn reference(&self) -> RecoveryEntry {
        let mut best = 0;
        for (i, e) in self.entries.iter().enumerate() {
            if e.mean_conf >= self.entries[best].mean_conf {
                best = i;
            }
        }
        self.entries[best].clone()
    }

    /// Buffers a frame, evicting the oldest entry beyond the capacity.
    pub fn push(&mut self, frame: FrameInput, mean_conf: f64) {
        self.entries.push_back(RecoveryEntry { frame, mean_conf });
        while self.entries.len() > RECOVERY_BUFFER_CAP {
            self.entries.pop_front();
        }
    }

    /// Returns the current reference (see [`Self::reference`]), then pushes
    /// the incoming frame.
    pub fn step(&mut self, frame: FrameInput, mean_conf: f64) -> RecoveryEntry {
        let reference = self.reference();
        self.push(frame, mean_conf);
        reference
    }
}
