//! Object measurement from a reconstructed cloud: crop around each
//! ground-truth object, suppress floor hits, and report the longest
//! principal-axis extent against the object's nominal size.

use nalgebra::{Matrix3, Vector3};

use crate::sim::{Scene, SceneObject};

/// Ground-truth crop boxes are inflated by this factor so reconstruction
/// error does not push points outside the crop.
pub const CROP_INFLATION: f64 = 1.2;
/// Points within this distance of the floor plane are treated as floor
/// returns and excluded from object extents.
pub const FLOOR_MARGIN: f64 = 0.015;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMeasurement {
    pub name: String,
    pub truth: f64,
    /// Longest principal extent of the cropped points; None when the crop
    /// is empty (reported as "ND").
    pub measured: Option<f64>,
    pub percent_error: Option<f64>,
    pub point_count: usize,
}

/// World axis-aligned bounding box of an object, inflated about its center.
pub fn object_crop_box(obj: &SceneObject, inflation: f64) -> (Vector3<f64>, Vector3<f64>) {
    let (local_center, half) = obj.shape.local_bounds();
    let center = obj.pose.transform_point(&local_center);
    let r = obj.pose.rotation;
    let mut world_half = Vector3::zeros();
    for a in 0..3 {
        world_half[a] = (0..3).map(|b| r[(a, b)].abs() * half[b]).sum::<f64>();
    }
    (center, world_half * inflation)
}

fn longest_principal_extent(points: &[Vector3<f64>]) -> f64 {
    let n = points.len() as f64;
    let centroid: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::<f64>::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eigen = cov.symmetric_eigen();
    let mut best = 0.0f64;
    for k in 0..3 {
        let axis = eigen.eigenvectors.column(k);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in points {
            let t = (p - centroid).dot(&axis);
            lo = lo.min(t);
            hi = hi.max(t);
        }
        best = best.max(hi - lo);
    }
    best
}

/// Measures one object: crops the cloud to the object's inflated bounding
/// box, drops points near the floor plane, and reports the longest
/// principal extent. An empty crop yields `measured: None`.
pub fn measure_object(
    points: &[[f32; 3]],
    obj: &SceneObject,
    floor_z: Option<f64>,
) -> ObjectMeasurement {
    let (center, half) = object_crop_box(obj, CROP_INFLATION);
    let mut kept = Vec::new();
    for p in points {
        let w = Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
        if (w - center).zip_map(&half, |d, h| d.abs() <= h) != Vector3::new(true, true, true) {
            continue;
        }
        if let Some(z) = floor_z {
            if (w.z - z).abs() <= FLOOR_MARGIN {
                continue;
            }
        }
        kept.push(w);
    }
    let truth = obj.shape.nominal_extent();
    if kept.is_empty() {
        return ObjectMeasurement {
            name: obj.name.clone(),
            truth,
            measured: None,
            percent_error: None,
            point_count: 0,
        };
    }
    let measured = longest_principal_extent(&kept);
    ObjectMeasurement {
        name: obj.name.clone(),
        truth,
        measured: Some(measured),
        percent_error: Some(100.0 * (measured - truth) / truth),
        point_count: kept.len(),
    }
}

/// Measures every object in the scene.
pub fn measure_scene(points: &[[f32; 3]], scene: &Scene) -> Vec<ObjectMeasurement> {
    let floor_z = scene.floor.as_ref().map(|f| f.z);
    scene.objects.iter().map(|o| measure_object(points, o, floor_z)).collect()
}

/// One line per object: name, measured extent or ND, truth, percent error.
pub fn format_report(measurements: &[ObjectMeasurement]) -> String {
    let mut out = String::new();
    for m in measurements {
        match (m.measured, m.percent_error) {
            (Some(v), Some(e)) => out.push_str(&format!(
                "{:<14} measured {:.4} m  truth {:.4} m  error {:+.1}%  ({} points)\n",
                m.name, v, m.truth, e, m.point_count
            )),
            _ => out.push_str(&format!(
                "{:<14} measured ND        truth {:.4} m\n",
                m.name, m.truth
            )),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use crate::sim::Shape;
    use approx::assert_abs_diff_eq;

    /// Deterministic samples over all six faces of an oriented box.
    fn box_surface(obj: &SceneObject, per_edge: usize) -> Vec<[f32; 3]> {
        let Shape::Box { half_extents: he } = obj.shape else { panic!("not a box") };
        let mut pts = Vec::new();
        let lerp = |h: f64, i: usize| -h + 2.0 * h * i as f64 / (per_edge - 1) as f64;
        for axis in 0..3 {
            for side in [-1.0, 1.0] {
                for i in 0..per_edge {
                    for j in 0..per_edge {
                        let mut p = Vector3::zeros();
                        p[axis] = side * he[axis];
                        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                        p[a] = lerp(he[a], i);
                        p[b] = lerp(he[b], j);
                        let w = obj.pose.transform_point(&p);
                        pts.push([w.x as f32, w.y as f32, w.z as f32]);
                    }
                }
            }
        }
        pts
    }

    fn brick() -> SceneObject {
        SceneObject {
            name: "brick".into(),
            shape: Shape::Box { half_extents: [0.101, 0.05, 0.03] },
            pose: RigidTransform::from_axis_angle(
                Vector3::z(),
                0.35,
                Vector3::new(0.32, 0.18, 0.2),
            ),
            color: [152, 62, 48],
        }
    }

    #[test]
    fn exact_box_cloud_measures_ground_truth() {
        let obj = brick();
        let pts = box_surface(&obj, 9);
        let m = measure_object(&pts, &obj, None);
        // f32 storage rounds the samples, so exactness is at f32 grain
        assert_abs_diff_eq!(m.measured.unwrap(), 0.202, epsilon = 1e-6);
        assert!(m.percent_error.unwrap().abs() < 1e-3);
        assert_eq!(m.point_count, pts.len());
    }

    #[test]
    fn floor_points_are_excluded_from_the_extent() {
        // object sits on the floor; contaminate the crop with floor hits
        let mut obj = brick();
        obj.pose.translation.z = 0.03;
        let mut pts = box_surface(&obj, 9);
        let clean = measure_object(&pts, &obj, Some(0.0));
        for i in 0..200 {
            let x = obj.pose.translation.x + 0.11 * ((i % 20) as f64 / 19.0 - 0.5);
            let y = obj.pose.translation.y + 0.11 * ((i / 20) as f64 / 9.0 - 0.5);
            pts.push([x as f32, y as f32, 0.004]);
        }
        let with_floor = measure_object(&pts, &obj, Some(0.0));
        assert_eq!(with_floor.measured, clean.measured);
        // without floor suppression the extra points would be counted
        let unsuppressed = measure_object(&pts, &obj, None);
        assert!(unsuppressed.point_count > with_floor.point_count);
    }

    #[test]
    fn empty_crop_reports_nd() {
        let obj = brick();
        let pts = vec![[5.0f32, 5.0, 5.0]; 10];
        let m = measure_object(&pts, &obj, None);
        assert_eq!(m.measured, None);
        assert_eq!(m.point_count, 0);
        let report = format_report(&[m]);
        assert!(report.contains("ND"));
        assert!(report.contains("0.2020"));
    }

    #[test]
    fn crop_ignores_points_from_other_objects() {
        let obj = brick();
        let mut pts = box_surface(&obj, 9);
        let clean = measure_object(&pts, &obj, None).measured.unwrap();
        // a distant cluster far outside the inflated crop
        for i in 0..50 {
            pts.push([-0.8 + 0.001 * i as f32, -0.8, 0.1]);
        }
        let m = measure_object(&pts, &obj, None);
        assert_abs_diff_eq!(m.measured.unwrap(), clean, epsilon = 1e-12);
    }

    #[test]
    fn scene_report_covers_every_object() {
        let scene = crate::sim::Scene::benchmark();
        let pts = box_surface(&scene.objects[0].clone(), 6);
        let ms = measure_scene(&pts, &scene);
        assert_eq!(ms.len(), scene.objects.len());
        assert!(ms[0].measured.is_some());
        // other objects see no points
        assert!(ms[1].measured.is_none());
    }

    #[test]
    fn crop_box_covers_rotated_extents() {
        let obj = brick();
        let (center, half) = object_crop_box(&obj, 1.0);
        assert_abs_diff_eq!(center.x, 0.32, epsilon = 1e-12);
        // rotated box projects wider than its local half extents
        let c = 0.35f64.cos();
        let s = 0.35f64.sin();
        assert_abs_diff_eq!(half.x, c * 0.101 + s * 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(half.z, 0.03, epsilon = 1e-12);
    }
}
