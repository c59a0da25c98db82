//! Synthetic ground truth: primitive scenes, ray-cast rendering, sonar
//! simulation, turbidity attenuation, and trajectory generation.

use crate::acoustic::{sonar_direction, AcousticError, SonarScan};
use crate::geometry::{look_at, PinholeCamera, RigidTransform};
use crate::raster::{DepthImage, ImageRgb};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

const RAY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Centered at the local origin.
    Box { half_extents: [f64; 3] },
    /// Base disc at the local origin, axis +z, extends to z = height.
    Cylinder { radius: f64, height: f64 },
    /// Centered at the local origin.
    Sphere { radius: f64 },
}

impl Shape {
    /// Longest caliper dimension, the quantity a measurement is checked against.
    pub fn nominal_extent(&self) -> f64 {
        match self {
            Shape::Box { half_extents } => 2.0 * half_extents.iter().cloned().fold(0.0, f64::max),
            Shape::Cylinder { radius, height } => (2.0 * radius).max(*height),
            Shape::Sphere { radius } => 2.0 * radius,
        }
    }

    /// Local-frame bounding box as (center, half extents).
    pub fn local_bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        match self {
            Shape::Box { half_extents } => (
                Vector3::zeros(),
                Vector3::new(half_extents[0], half_extents[1], half_extents[2]),
            ),
            Shape::Cylinder { radius, height } => (
                Vector3::new(0.0, 0.0, 0.5 * height),
                Vector3::new(*radius, *radius, 0.5 * height),
            ),
            Shape::Sphere { radius } => (Vector3::zeros(), Vector3::new(*radius, *radius, *radius)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub name: String,
    pub shape: Shape,
    pub pose: RigidTransform,
    pub color: [u8; 3],
}

impl SceneObject {
    /// World-frame bounding sphere (center, radius).
    pub fn bounding_sphere(&self) -> (Vector3<f64>, f64) {
        let (c, he) = self.shape.local_bounds();
        (self.pose.transform_point(&c), he.norm())
    }
}

/// Infinite floor at a fixed z with a low-contrast checker pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloorPlane {
    pub z: f64,
    pub color_a: [u8; 3],
    pub color_b: [u8; 3],
    pub checker: f64,
}

impl FloorPlane {
    pub fn sediment(z: f64) -> Self {
        Self { z, color_a: [105, 95, 78], color_b: [96, 88, 72], checker: 0.1 }
    }

    fn color_at(&self, x: f64, y: f64) -> [u8; 3] {
        let parity = ((x / self.checker).floor() as i64 + (y / self.checker).floor() as i64) & 1;
        if parity == 0 {
            self.color_a
        } else {
            self.color_b
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub floor: Option<FloorPlane>,
}

/// Nearest surface along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub color: [u8; 3],
    /// Index into `scene.objects`; `None` for the floor.
    pub object: Option<usize>,
}

impl Scene {
    pub fn empty() -> Self {
        Self { objects: Vec::new(), floor: None }
    }

    /// The benchmark workspace: sediment floor plus four objects whose
    /// longest dimensions are 0.202 m (brick), 0.395 m (cinder block),
    /// 0.097 m (pipe) and 0.118 m (mug). The cinder block shares the
    /// sediment color, which makes it the hardest target optically.
    pub fn benchmark() -> Self {
        let floor = FloorPlane::sediment(0.0);
        let objects = vec![
            SceneObject {
                name: "brick".into(),
                shape: Shape::Box { half_extents: [0.101, 0.05, 0.03] },
                pose: RigidTransform::from_axis_angle(
                    Vector3::z(),
                    0.35,
                    Vector3::new(0.32, 0.18, 0.03),
                ),
                color: [152, 62, 48],
            },
            SceneObject {
                name: "cinder_block".into(),
                shape: Shape::Box { half_extents: [0.1975, 0.095, 0.095] },
                pose: RigidTransform::from_axis_angle(
                    Vector3::z(),
                    -0.26,
                    Vector3::new(-0.35, 0.22, 0.095),
                ),
                color: floor.color_a,
            },
            SceneObject {
                name: "pipe".into(),
                shape: Shape::Cylinder { radius: 0.0485, height: 0.08 },
                pose: RigidTransform::from_axis_angle(
                    Vector3::y(),
                    std::f64::consts::FRAC_PI_2,
                    Vector3::new(0.24, -0.30, 0.0485),
                ),
                color: [70, 72, 75],
            },
            SceneObject {
                name: "mug".into(),
                shape: Shape::Cylinder { radius: 0.059, height: 0.11 },
                pose: RigidTransform::new(
                    nalgebra::Matrix3::identity(),
                    Vector3::new(-0.22, -0.33, 0.0),
                ),
                color: [58, 108, 122],
            },
        ];
        Self { objects, floor: Some(floor) }
    }

    /// Deterministic samples of every object surface at roughly `step`
    /// spacing, plus the floor within `floor_half_extent` of the origin
    /// when requested. Ground-truth tooling for coverage and distance
    /// checks against reconstructed or mapped geometry.
    pub fn surface_samples(&self, step: f64, floor_half_extent: Option<f64>) -> Vec<Vector3<f64>> {
        assert!(step > 0.0);
        let mut pts = Vec::new();
        let counts = |len: f64| ((len / step).ceil() as usize).max(1);
        for obj in &self.objects {
            match obj.shape {
                Shape::Box { half_extents: he } => {
                    for axis in 0..3 {
                        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                        let (na, nb) = (counts(2.0 * he[a]), counts(2.0 * he[b]));
                        for side in [-1.0, 1.0] {
                            for i in 0..=na {
                                for j in 0..=nb {
                                    let mut p = Vector3::zeros();
                                    p[axis] = side * he[axis];
                                    p[a] = -he[a] + 2.0 * he[a] * i as f64 / na as f64;
                                    p[b] = -he[b] + 2.0 * he[b] * j as f64 / nb as f64;
                                    pts.push(obj.pose.transform_point(&p));
                                }
                            }
                        }
                    }
                }
                Shape::Cylinder { radius, height } => {
                    let n_ang = counts(std::f64::consts::TAU * radius).max(8);
                    let n_z = counts(height);
                    for k in 0..n_ang {
                        let ang = std::f64::consts::TAU * k as f64 / n_ang as f64;
                        let (s, c) = ang.sin_cos();
                        for i in 0..=n_z {
                            let z = height * i as f64 / n_z as f64;
                            pts.push(obj.pose.transform_point(&Vector3::new(
                                radius * c,
                                radius * s,
                                z,
                            )));
                        }
                        // end caps as radial spokes
                        let n_r = counts(radius);
                        for i in 0..=n_r {
                            let r = radius * i as f64 / n_r as f64;
                            for z in [0.0, height] {
                                pts.push(obj.pose.transform_point(&Vector3::new(
                                    r * c,
                                    r * s,
                                    z,
                                )));
                            }
                        }
                    }
                }
                Shape::Sphere { radius } => {
                    let n_lat = counts(std::f64::consts::PI * radius).max(4);
                    for i in 0..=n_lat {
                        let phi = std::f64::consts::PI * i as f64 / n_lat as f64;
                        let ring_r = radius * phi.sin();
                        let n_lon = counts(std::f64::consts::TAU * ring_r).max(1);
                        for j in 0..n_lon {
                            let theta = std::f64::consts::TAU * j as f64 / n_lon as f64;
                            pts.push(obj.pose.transform_point(&Vector3::new(
                                ring_r * theta.cos(),
                                ring_r * theta.sin(),
                                radius * phi.cos(),
                            )));
                        }
                    }
                }
            }
        }
        if let (Some(half), Some(floor)) = (floor_half_extent, self.floor.as_ref()) {
            let n = counts(2.0 * half);
            for i in 0..=n {
                for j in 0..=n {
                    pts.push(Vector3::new(
                        -half + 2.0 * half * i as f64 / n as f64,
                        -half + 2.0 * half * j as f64 / n as f64,
                        floor.z,
                    ));
                }
            }
        }
        pts
    }

    /// Centroid of object bounding-sphere centers; origin when empty.
    pub fn center(&self) -> Vector3<f64> {
        if self.objects.is_empty() {
            return Vector3::zeros();
        }
        let sum: Vector3<f64> =
            self.objects.iter().map(|o| o.bounding_sphere().0).sum();
        sum / self.objects.len() as f64
    }

    pub fn raycast_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        let mut consider = |t: f64, color: [u8; 3], object: Option<usize>, this: &Scene| {
            let _ = this;
            if t > RAY_EPS && best.as_ref().map_or(true, |b| t < b.t) {
                best = Some(RayHit { t, point: origin + dir * t, color, object });
            }
        };
        for (i, obj) in self.objects.iter().enumerate() {
            let inv = obj.pose.invert();
            let o = inv.transform_point(origin);
            let d = inv.rotation * dir;
            let t = match &obj.shape {
                Shape::Box { half_extents } => {
                    ray_box(&o, &d, &Vector3::new(half_extents[0], half_extents[1], half_extents[2]))
                }
                Shape::Cylinder { radius, height } => ray_cylinder(&o, &d, *radius, *height),
                Shape::Sphere { radius } => ray_sphere(&o, &d, *radius),
            };
            if let Some(t) = t {
                consider(t, obj.color, Some(i), self);
            }
        }
        if let Some(floor) = &self.floor {
            if dir.z.abs() > 1e-15 {
                let t = (floor.z - origin.z) / dir.z;
                if t > RAY_EPS {
                    let p = origin + dir * t;
                    consider(t, floor.color_at(p.x, p.y), None, self);
                }
            }
        }
        best
    }

    /// Ground-truth render: per-pixel nearest-hit ray length (depth means
    /// ray length) and surface color. No-hit pixels are invalid in depth and
    /// painted the water background.
    pub fn raycast(&self, cam: &PinholeCamera, pose_wc: &RigidTransform) -> (DepthImage, ImageRgb) {
        let mut depth = DepthImage::new_invalid(cam.width, cam.height).expect("camera dims");
        let mut color = ImageRgb::new(cam.width, cam.height).expect("camera dims");
        let origin = pose_wc.translation;
        for v in 0..cam.height {
            for u in 0..cam.width {
                let (uc, vc) = PinholeCamera::pixel_center(u, v);
                let dir = pose_wc.rotation * cam.ray_direction(uc, vc);
                match self.raycast_ray(&origin, &dir) {
                    Some(hit) => {
                        depth.set(u, v, hit.t as f32);
                        color.set(u, v, hit.color);
                    }
                    None => color.set(u, v, WATER_COLOR),
                }
            }
        }
        (depth, color)
    }
}

pub const WATER_COLOR: [u8; 3] = [20, 38, 44];

fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, he: &Vector3<f64>) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > he[k] {
                return None;
            }
        } else {
            let inv = 1.0 / d[k];
            let (ta, tb) = ((-he[k] - o[k]) * inv, (he[k] - o[k]) * inv);
            let (ta, tb) = if ta <= tb { (ta, tb) } else { (tb, ta) };
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
    }
    if t0 > RAY_EPS {
        Some(t0)
    } else if t1 > RAY_EPS {
        Some(t1)
    } else {
        None
    }
}

fn ray_sphere(o: &Vector3<f64>, d: &Vector3<f64>, r: f64) -> Option<f64> {
    let b = o.dot(d);
    let c = o.dot(o) - r * r;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    let t1 = -b + sq;
    if t0 > RAY_EPS {
        Some(t0)
    } else if t1 > RAY_EPS {
        Some(t1)
    } else {
        None
    }
}

fn ray_cylinder(o: &Vector3<f64>, d: &Vector3<f64>, r: f64, h: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > RAY_EPS && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    };
    // Lateral surface: (ox + t dx)^2 + (oy + t dy)^2 = r^2, 0 <= z <= h.
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-15 {
        let b = o.x * d.x + o.y * d.y;
        let c = o.x * o.x + o.y * o.y - r * r;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / a, (-b + sq) / a] {
                let z = o.z + t * d.z;
                if (0.0..=h).contains(&z) {
                    consider(t);
                }
            }
        }
    }
    // End caps at z = 0 and z = h.
    if d.z.abs() > 1e-15 {
        for plane_z in [0.0, h] {
            let t = (plane_z - o.z) / d.z;
            let x = o.x + t * d.x;
            let y = o.y + t * d.y;
            if x * x + y * y <= r * r {
                consider(t);
            }
        }
    }
    best
}

/// Exponential visibility loss with range: multiplier exp(-beta * ntu * r).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurbidityModel {
    pub ntu: f64,
    pub beta: f64,
}

pub const DEFAULT_TURBIDITY_BETA: f64 = 0.25;

impl TurbidityModel {
    pub fn new(ntu: f64) -> Self {
        Self { ntu, beta: DEFAULT_TURBIDITY_BETA }
    }

    pub fn clear() -> Self {
        Self::new(0.0)
    }

    #[inline]
    pub fn attenuation(&self, range: f64) -> f64 {
        (-self.beta * self.ntu * range).exp()
    }
}

/// Scales confidences by the turbidity multiplier at each pixel's depth;
/// invalid-depth pixels drop to zero confidence.
pub fn attenuate_confidence(conf: &mut [f32], depth: &DepthImage, model: &TurbidityModel) {
    assert_eq!(conf.len(), depth.data.len(), "confidence/depth size mismatch");
    for (c, &d) in conf.iter_mut().zip(&depth.data) {
        if d.is_finite() {
            *c *= model.attenuation(d as f64) as f32;
        } else {
            *c = 0.0;
        }
    }
}

/// Sonar geometry and echo-model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SonarParams {
    pub beam_count: usize,
    pub bin_count: usize,
    pub h_fov: f64,
    pub v_fov: f64,
    pub max_range: f64,
    pub gain: f64,
    /// Rays cast across the vertical FOV per beam.
    pub elev_samples: usize,
}

impl Default for SonarParams {
    fn default() -> Self {
        Self {
            beam_count: 512,
            bin_count: 96,
            h_fov: 130f64.to_radians(),
            v_fov: 20f64.to_radians(),
            max_range: 2.0,
            gain: 10.0,
            elev_samples: 48,
        }
    }
}

/// Casts an elevation fan per beam and collapses hits into range bins:
/// intensity = gain * (fraction of the fan returning from that bin). The
/// collapse reproduces the sensor's elevation ambiguity.
pub fn simulate_sonar(
    scene: &Scene,
    pose_ws: &RigidTransform,
    params: &SonarParams,
) -> Result<SonarScan, AcousticError> {
    let mut scan = SonarScan::new(
        params.beam_count,
        params.bin_count,
        params.h_fov,
        params.v_fov,
        params.max_range,
        *pose_ws,
    )?;
    let origin = pose_ws.translation;
    let per_ray = (params.gain / params.elev_samples as f64) as f32;
    for beam in 0..params.beam_count {
        let azimuth = scan.beam_azimuth(beam);
        for e in 0..params.elev_samples {
            let elevation =
                -0.5 * params.v_fov + (e as f64 + 0.5) * params.v_fov / params.elev_samples as f64;
            let dir = pose_ws.rotation * sonar_direction(azimuth, elevation);
            if let Some(hit) = scene.raycast_ray(&origin, &dir) {
                if let Some(bin) = scan.bin_of_range(hit.t) {
                    let cur = scan.intensity(beam, bin);
                    scan.set_intensity(beam, bin, cur + per_ray);
                }
            }
        }
    }
    Ok(scan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajectoryKind {
    /// Wide arc at large standoff, wrist tilt oscillating the sensor fan.
    Sweep,
    /// Approach segments toward each object at decreasing standoff,
    /// starting from the stowed position.
    ObjectCentric,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryParams {
    pub orbit_radius: f64,
    pub orbit_height: f64,
    pub arc: f64,
    pub min_standoff: f64,
    pub approach_start: f64,
    pub approach_end: f64,
    pub approach_elevation: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            orbit_radius: 1.1,
            orbit_height: 0.75,
            arc: 260f64.to_radians(),
            min_standoff: 0.25,
            approach_start: 0.9,
            approach_end: 0.35,
            // Steep enough that close-in views still meet the floor at under
            // ~50 deg incidence, where voxel ray ranges stay near truth.
            approach_elevation: 50f64.to_radians(),
        }
    }
}

pub fn gen_trajectory(
    kind: TrajectoryKind,
    scene: &Scene,
    n_frames: usize,
) -> Vec<RigidTransform> {
    gen_trajectory_with(kind, scene, n_frames, &TrajectoryParams::default())
}

pub fn gen_trajectory_with(
    kind: TrajectoryKind,
    scene: &Scene,
    n_frames: usize,
    params: &TrajectoryParams,
) -> Vec<RigidTransform> {
    assert!(n_frames >= 1, "trajectory needs at least one frame");
    match kind {
        TrajectoryKind::Sweep => sweep_trajectory(scene, n_frames, params),
        TrajectoryKind::ObjectCentric => object_centric_trajectory(scene, n_frames, params),
    }
}

fn sweep_trajectory(scene: &Scene, n: usize, p: &TrajectoryParams) -> Vec<RigidTransform> {
    let center = scene.center();
    let floor_z = scene.floor.map_or(0.0, |f| f.z);
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        let s = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
        let azimuth = -0.5 * p.arc + s * p.arc;
        if i % 3 == 2 {
            // Steep inner ring interleaved with the oblique orbit. Oblique
            // views leave acoustic shadows behind every object, and the
            // elevation-ambiguity arcs deposit spurious hits there that no
            // shadowed beam can carve back out. Near-vertical rays clear the
            // object tops, so the free space around each object keeps
            // collecting misses.
            let position = Vector3::new(
                center.x + 0.4 * p.orbit_radius * azimuth.cos(),
                center.y + 0.4 * p.orbit_radius * azimuth.sin(),
                floor_z + p.orbit_height + 0.8,
            );
            let target = Vector3::new(
                center.x + 0.15 * azimuth.cos(),
                center.y + 0.15 * azimuth.sin(),
                floor_z,
            );
            poses.push(look_at(position, target, Vector3::z()));
        } else {
            let position = Vector3::new(
                center.x + p.orbit_radius * azimuth.cos(),
                center.y + p.orbit_radius * azimuth.sin(),
                floor_z + p.orbit_height,
            );
            // Two tilt cycles across the arc sweep the fan over the workspace.
            let tilt = 0.35 * (2.0 * std::f64::consts::TAU * s).sin();
            let target = Vector3::new(center.x, center.y, floor_z + 0.1 + tilt);
            poses.push(look_at(position, target, Vector3::z()));
        }
    }
    enforce_standoff(scene, poses, p.min_standoff)
}

fn object_centric_trajectory(scene: &Scene, n: usize, p: &TrajectoryParams) -> Vec<RigidTransform> {
    let center = scene.center();
    let floor_z = scene.floor.map_or(0.0, |f| f.z);
    let stowed = Vector3::new(center.x + 1.2, center.y, floor_z + 0.9);
    let mut poses = vec![look_at(stowed, center, Vector3::z())];
    if scene.objects.is_empty() || n == 1 {
        poses.truncate(n.max(1));
        while poses.len() < n {
            poses.push(poses[0]);
        }
        return enforce_standoff(scene, poses, p.min_standoff);
    }

    // Visit objects in azimuth order for short transitions.
    let mut order: Vec<usize> = (0..scene.objects.len()).collect();
    order.sort_by(|&a, &b| {
        let pa = scene.objects[a].bounding_sphere().0 - center;
        let pb = scene.objects[b].bounding_sphere().0 - center;
        pa.y.atan2(pa.x).partial_cmp(&pb.y.atan2(pb.x)).unwrap()
    });

    let remaining = n - 1;
    let per_object = remaining / order.len();
    let extras = remaining % order.len();
    for (rank, &oi) in order.iter().enumerate() {
        let frames = per_object + usize::from(rank < extras);
        if frames == 0 {
            continue;
        }
        let (obj_center, obj_radius) = scene.objects[oi].bounding_sphere();
        let base_az = (obj_center.y - center.y).atan2(obj_center.x - center.x);
        for j in 0..frames {
            let s = if frames > 1 { j as f64 / (frames - 1) as f64 } else { 0.5 };
            let standoff =
                (p.approach_start + s * (p.approach_end - p.approach_start)).max(p.min_standoff + obj_radius);
            let azimuth = base_az + 25f64.to_radians() * (2.0 * s - 1.0);
            let elev = p.approach_elevation;
            let position = obj_center
                + Vector3::new(
                    standoff * elev.cos() * azimuth.cos(),
                    standoff * elev.cos() * azimuth.sin(),
                    standoff * elev.sin(),
                );
            poses.push(look_at(position, obj_center, Vector3::z()));
        }
    }
    enforce_standoff(scene, poses, p.min_standoff)
}

/// Pushes any pose radially away from an object it violates the standoff of.
fn enforce_standoff(
    scene: &Scene,
    mut poses: Vec<RigidTransform>,
    min_standoff: f64,
) -> Vec<RigidTransform> {
    for pose in poses.iter_mut() {
        for obj in &scene.objects {
            let (c, r) = obj.bounding_sphere();
            let offset = pose.translation - c;
            let required = r + min_standoff;
            let dist = offset.norm();
            if dist < required && dist > 1e-9 {
                let pos = c + offset * (required / dist);
                *pose = RigidTransform::new(pose.rotation, pos);
            }
        }
    }
    poses
}

/// Shortest distance from a pose's position to any object bounding sphere.
pub fn min_object_standoff(scene: &Scene, pose: &RigidTransform) -> f64 {
    scene
        .objects
        .iter()
        .map(|o| {
            let (c, r) = o.bounding_sphere();
            (pose.translation - c).norm() - r
        })
        .fold(f64::INFINITY, f64::min)
}
