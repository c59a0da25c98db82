//! Dataset directory layout and manifest. A dataset is a directory holding
//! `manifest.json`, `poses.txt`, `frames/NNNNNN.png`, and
//! `sonar/NNNNNN.bin`; the manifest carries intrinsics, sonar geometry, the
//! turbidity tag, the generator seed, and the ground-truth scene so that
//! mapping, reconstruction, and measurement all read from one place.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acoustic::{AcousticError, SonarScan};
use crate::geometry::{
    read_pose_file, write_pose_file, GeometryError, PinholeCamera, PoseRecord, RigidTransform,
};
use crate::pointmap::FrameInput;
use crate::raster::{ImageRgb, RasterError};
use crate::sim::{simulate_sonar, FloorPlane, Scene, SceneObject, Shape, SonarParams};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Acoustic(#[from] AcousticError),
    #[error("dataset inconsistent: {0}")]
    Inconsistent(String),
    #[error("frame {0} out of range")]
    FrameOutOfRange(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraSpec {
    pub fn from_camera(cam: &PinholeCamera) -> Self {
        CameraSpec {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
        }
    }

    pub fn to_camera(&self) -> Result<PinholeCamera, GeometryError> {
        PinholeCamera::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SonarSpec {
    pub beam_count: usize,
    pub bin_count: usize,
    pub h_fov: f64,
    pub v_fov: f64,
    pub max_range: f64,
    pub gain: f64,
    pub elev_samples: usize,
}

impl SonarSpec {
    pub fn from_params(p: &SonarParams) -> Self {
        SonarSpec {
            beam_count: p.beam_count,
            bin_count: p.bin_count,
            h_fov: p.h_fov,
            v_fov: p.v_fov,
            max_range: p.max_range,
            gain: p.gain,
            elev_samples: p.elev_samples,
        }
    }

    pub fn to_params(&self) -> SonarParams {
        SonarParams {
            beam_count: self.beam_count,
            bin_count: self.bin_count,
            h_fov: self.h_fov,
            v_fov: self.v_fov,
            max_range: self.max_range,
            gain: self.gain,
            elev_samples: self.elev_samples,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeSpec {
    Box { half_extents: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObjectSpec {
    pub name: String,
    pub shape: ShapeSpec,
    /// Pose as tx ty tz qx qy qz qw.
    pub pose: [f64; 7],
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FloorSpec {
    pub z: f64,
    pub color_a: [u8; 3],
    pub color_b: [u8; 3],
    pub checker: f64,
}

/// Serializable ground-truth scene, kept in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub floor: Option<FloorSpec>,
}

fn pose_to_array(t: &RigidTransform) -> [f64; 7] {
    let (tr, qx, qy, qz, qw) = t.to_quaternion();
    [tr.x, tr.y, tr.z, qx, qy, qz, qw]
}

fn pose_from_array(a: &[f64; 7]) -> RigidTransform {
    RigidTransform::from_quaternion(Vector3::new(a[0], a[1], a[2]), a[3], a[4], a[5], a[6])
}

impl SceneSpec {
    pub fn from_scene(scene: &Scene) -> Self {
        SceneSpec {
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectSpec {
                    name: o.name.clone(),
                    shape: match o.shape {
                        Shape::Box { half_extents } => ShapeSpec::Box { half_extents },
                        Shape::Cylinder { radius, height } => {
                            ShapeSpec::Cylinder { radius, height }
                        }
                        Shape::Sphere { radius } => ShapeSpec::Sphere { radius },
                    },
                    pose: pose_to_array(&o.pose),
                    color: o.color,
                })
                .collect(),
            floor: scene.floor.as_ref().map(|f| FloorSpec {
                z: f.z,
                color_a: f.color_a,
                color_b: f.color_b,
                checker: f.checker,
            }),
        }
    }

    pub fn to_scene(&self) -> Scene {
        Scene {
            objects: self
                .objects
                .iter()
                .map(|o| SceneObject {
                    name: o.name.clone(),
                    shape: match o.shape {
                        ShapeSpec::Box { half_extents } => Shape::Box { half_extents },
                        ShapeSpec::Cylinder { radius, height } => {
                            Shape::Cylinder { radius, height }
                        }
                        ShapeSpec::Sphere { radius } => Shape::Sphere { radius },
                    },
                    pose: pose_from_array(&o.pose),
                    color: o.color,
                })
                .collect(),
            floor: self.floor.as_ref().map(|f| FloorPlane {
                z: f.z,
                color_a: f.color_a,
                color_b: f.color_b,
                checker: f.checker,
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub frame_count: usize,
    pub camera: CameraSpec,
    pub sonar: SonarSpec,
    /// Turbidity tag of the dataset; drives confidence attenuation.
    pub ntu: f64,
    pub seed: u64,
    pub scene: SceneSpec,
}

/// A dataset directory opened for reading. Images and scans are loaded on
/// demand; poses are held in memory.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub poses: Vec<RigidTransform>,
}

pub fn frame_rel_path(index: usize) -> String {
    format!("frames/{index:06}.png")
}

pub fn sonar_rel_path(index: usize) -> String {
    format!("sonar/{index:06}.bin")
}

/// Renders and writes a complete dataset: per-frame color images and sonar
/// scans along the trajectory, the pose file, and the manifest. The sonar
/// shares the camera pose (both ride the same wrist). Returns the dataset
/// handle for immediate use.
pub fn write_dataset(
    dir: &Path,
    scene: &Scene,
    cam: &PinholeCamera,
    sonar: &SonarParams,
    trajectory: &[RigidTransform],
    ntu: f64,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    std::fs::create_dir_all(dir.join("frames"))?;
    std::fs::create_dir_all(dir.join("sonar"))?;
    let mut records = Vec::with_capacity(trajectory.len());
    for (i, pose) in trajectory.iter().enumerate() {
        let (_, color) = scene.raycast(cam, pose);
        color.save_png(&dir.join(frame_rel_path(i)))?;
        let scan = simulate_sonar(scene, pose, sonar)?;
        scan.save(&dir.join(sonar_rel_path(i)))?;
        records.push(PoseRecord { frame_id: i as u64, pose: *pose });
    }
    write_pose_file(&dir.join("poses.txt"), &records)?;
    let manifest = DatasetManifest {
        frame_count: trajectory.len(),
        camera: CameraSpec::from_camera(cam),
        sonar: SonarSpec::from_params(sonar),
        ntu,
        seed,
        scene: SceneSpec::from_scene(scene),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(Dataset { root: dir.to_path_buf(), manifest, poses: trajectory.to_vec() })
}

impl Dataset {
    /// Opens a dataset directory, checking that the pose count matches the
    /// manifest and that the first and last referenced files exist with the
    /// declared image dimensions.
    pub fn open(dir: &Path) -> Result<Dataset, DatasetError> {
        let manifest: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let records = read_pose_file(&dir.join("poses.txt"))?;
        if records.len() != manifest.frame_count {
            return Err(DatasetError::Inconsistent(format!(
                "manifest declares {} frames but poses.txt has {}",
                manifest.frame_count,
                records.len()
            )));
        }
        for (i, r) in records.iter().enumerate() {
            if r.frame_id != i as u64 {
                return Err(DatasetError::Inconsistent(format!(
                    "pose line {i} has frame id {}",
                    r.frame_id
                )));
            }
        }
        let ds = Dataset {
            root: dir.to_path_buf(),
            poses: records.into_iter().map(|r| r.pose).collect(),
            manifest,
        };
        if ds.manifest.frame_count > 0 {
            for idx in [0, ds.manifest.frame_count - 1] {
                let img = ds.frame_image(idx)?;
                if img.width != ds.manifest.camera.width || img.height != ds.manifest.camera.height
                {
                    return Err(DatasetError::Inconsistent(format!(
                        "frame {idx} is {}x{} but the manifest declares {}x{}",
                        img.width, img.height, ds.manifest.camera.width, ds.manifest.camera.height
                    )));
                }
                if !ds.sonar_path(idx).is_file() {
                    return Err(DatasetError::Inconsistent(format!("missing sonar scan {idx}")));
                }
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.manifest.frame_count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frame_count == 0
    }

    pub fn frame_path(&self, index: usize) -> PathBuf {
        self.root.join(frame_rel_path(index))
    }

    pub fn sonar_path(&self, index: usize) -> PathBuf {
        self.root.join(sonar_rel_path(index))
    }

    pub fn frame_image(&self, index: usize) -> Result<ImageRgb, DatasetError> {
        if index >= self.len() {
            return Err(DatasetError::FrameOutOfRange(index));
        }
        Ok(ImageRgb::load_png(&self.frame_path(index))?)
    }

    /// Frame image plus kinematic pose, as the pipeline consumes it.
    pub fn frame(&self, index: usize) -> Result<FrameInput, DatasetError> {
        let image = self.frame_image(index)?;
        Ok(FrameInput { id: index as u64, image, pose: self.poses[index] })
    }

    pub fn sonar_scan(&self, index: usize) -> Result<SonarScan, DatasetError> {
        if index >= self.len() {
            return Err(DatasetError::FrameOutOfRange(index));
        }
        Ok(SonarScan::load(&self.sonar_path(index))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{gen_trajectory, TrajectoryKind};
    use tempfile::tempdir;

    fn tiny_camera() -> PinholeCamera {
        PinholeCamera::new(40.0, 40.0, 24.0, 18.0, 48, 36).unwrap()
    }

    fn tiny_sonar() -> SonarParams {
        SonarParams { beam_count: 32, bin_count: 24, elev_samples: 8, ..SonarParams::default() }
    }

    #[test]
    fn write_then_open_round_trips_everything() {
        let dir = tempdir().unwrap();
        let scene = Scene::benchmark();
        let cam = tiny_camera();
        let sonar = tiny_sonar();
        let traj = gen_trajectory(TrajectoryKind::Sweep, &scene, 4);
        let ds = write_dataset(dir.path(), &scene, &cam, &sonar, &traj, 3.5, 42).unwrap();
        assert_eq!(ds.len(), 4);

        let back = Dataset::open(dir.path()).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back.manifest.ntu, 3.5);
        assert_eq!(back.manifest.seed, 42);
        assert_eq!(back.manifest.camera, CameraSpec::from_camera(&cam));
        assert_eq!(back.manifest.sonar, SonarSpec::from_params(&sonar));
        for i in 0..4 {
            assert!((back.poses[i].translation - traj[i].translation).norm() < 1e-8);
        }
        let f = back.frame(2).unwrap();
        assert_eq!(f.id, 2);
        assert_eq!(f.image.width, 48);
        let scan = back.sonar_scan(1).unwrap();
        assert_eq!(scan.beam_count, 32);
        assert!(back.frame(4).is_err());
    }

    #[test]
    fn scene_spec_round_trips_benchmark_scene() {
        let scene = Scene::benchmark();
        let spec = SceneSpec::from_scene(&scene);
        let back = spec.to_scene();
        assert_eq!(back.objects.len(), scene.objects.len());
        for (a, b) in scene.objects.iter().zip(&back.objects) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.color, b.color);
            assert!((a.pose.translation - b.pose.translation).norm() < 1e-12);
            assert!((a.pose.rotation - b.pose.rotation).norm() < 1e-9);
            assert_eq!(a.shape.nominal_extent(), b.shape.nominal_extent());
        }
        assert_eq!(back.floor.unwrap().z, scene.floor.unwrap().z);

        // and through JSON
        let json = serde_json::to_string(&spec).unwrap();
        let reparsed: SceneSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(reparsed, spec);
    }

    #[test]
    fn open_rejects_pose_count_mismatch() {
        let dir = tempdir().unwrap();
        let scene = Scene::benchmark();
        let traj = gen_trajectory(TrajectoryKind::Sweep, &scene, 3);
        write_dataset(dir.path(), &scene, &tiny_camera(), &tiny_sonar(), &traj, 0.0, 1).unwrap();
        // drop one pose line
        let poses = std::fs::read_to_string(dir.path().join("poses.txt")).unwrap();
        let truncated: Vec<&str> = poses.lines().take(2).collect();
        std::fs::write(dir.path().join("poses.txt"), truncated.join("\n")).unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(DatasetError::Inconsistent(_))));
    }

    #[test]
    fn open_rejects_missing_scan() {
        let dir = tempdir().unwrap();
        let scene = Scene::benchmark();
        let traj = gen_trajectory(TrajectoryKind::Sweep, &scene, 2);
        write_dataset(dir.path(), &scene, &tiny_camera(), &tiny_sonar(), &traj, 0.0, 1).unwrap();
        std::fs::remove_file(dir.path().join(sonar_rel_path(1))).unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(DatasetError::Inconsistent(_))));
    }
}
