//! Sonar occupancy grid: scan integration with elevation-arc evidence and
//! acoustic depth rendering by voxel traversal.
//!
//! A multibeam sonar measures (azimuth, range) but not elevation. Each
//! above-threshold intensity cell therefore stamps a hit along its entire
//! elevation arc; arcs observed from enough distinct poses intersect only at
//! the true surface, which is where hit counts concentrate. Range bins in
//! front of the first return stamp misses, so free space accumulates
//! contradicting evidence and the occupancy ratio test rejects it.

use crate::geometry::{PinholeCamera, RigidTransform};
use crate::raster::DepthImage;
use nalgebra::Vector3;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AcousticError {
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("invalid sonar scan: {0}")]
    BadScan(String),
    #[error("scan pose is not finite")]
    NonFinitePose,
    #[error("grid file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Default minimum hit count for occupancy.
///
/// Elevation arcs smear every return across the vertical aperture, so raw
/// hits grossly over-cover the true surface; a high hit floor plus a strict
/// hit ratio keeps only voxels where arcs from many viewpoints intersect.
/// With the looser rule (3, 0.3) occupied shells come out several voxels
/// thick and ray-cast ranges read short by 20-30%.
pub const DEFAULT_K_HIT: u32 = 8;
/// Default minimum hit/(hit+miss) ratio for occupancy.
pub const DEFAULT_R_OCC: f64 = 0.9;

/// Dense voxel grid accumulating sonar evidence.
///
/// `origin` is the world position of the minimum corner of voxel (0,0,0).
/// A voxel is occupied iff `hit >= k_hit` and `hit/(hit+miss) >= r_occ`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub origin: Vector3<f64>,
    pub resolution: f64,
    pub dims: [usize; 3],
    pub k_hit: u32,
    pub r_occ: f64,
    hits: Vec<u32>,
    misses: Vec<u32>,
    occupied: Vec<bool>,
}

const MAX_VOXELS: usize = 64_000_000;

impl OccupancyGrid {
    pub fn new(
        origin: Vector3<f64>,
        resolution: f64,
        dims: [usize; 3],
    ) -> Result<Self, AcousticError> {
        Self::with_rule(origin, resolution, dims, DEFAULT_K_HIT, DEFAULT_R_OCC)
    }

    pub fn with_rule(
        origin: Vector3<f64>,
        resolution: f64,
        dims: [usize; 3],
        k_hit: u32,
        r_occ: f64,
    ) -> Result<Self, AcousticError> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(AcousticError::BadGrid(format!("resolution {resolution}")));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(AcousticError::BadGrid(format!("dims {dims:?}")));
        }
        let total = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .filter(|&v| v <= MAX_VOXELS)
            .ok_or_else(|| AcousticError::BadGrid(format!("dims {dims:?} too large")))?;
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(AcousticError::BadGrid("non-finite origin".into()));
        }
        if k_hit == 0 || !(0.0..=1.0).contains(&r_occ) {
            return Err(AcousticError::BadGrid(format!("rule k_hit={k_hit}, r_occ={r_occ}")));
        }
        Ok(Self {
            origin,
            resolution,
            dims,
            k_hit,
            r_occ,
            hits: vec![0; total],
            misses: vec![0; total],
            occupied: vec![false; total],
        })
    }

    #[inline]
    pub fn linear(&self, i: [usize; 3]) -> usize {
        (i[2] * self.dims[1] + i[1]) * self.dims[0] + i[0]
    }

    #[inline]
    pub fn world_to_index(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let inv = 1.0 / self.resolution;
        let fx = (p.x - self.origin.x) * inv;
        let fy = (p.y - self.origin.y) * inv;
        let fz = (p.z - self.origin.z) * inv;
        if fx < 0.0 || fy < 0.0 || fz < 0.0 {
            return None;
        }
        let (ix, iy, iz) = (fx as usize, fy as usize, fz as usize);
        if ix >= self.dims[0] || iy >= self.dims[1] || iz >= self.dims[2] {
            return None;
        }
        Some([ix, iy, iz])
    }

    #[inline]
    pub fn index_to_world_center(&self, i: [usize; 3]) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                (i[0] as f64 + 0.5) * self.resolution,
                (i[1] as f64 + 0.5) * self.resolution,
                (i[2] as f64 + 0.5) * self.resolution,
            )
    }

    #[inline]
    fn recompute_occupancy(&mut self, lin: usize) {
        let h = self.hits[lin];
        let m = self.misses[lin];
        self.occupied[lin] =
            h >= self.k_hit && (h as f64) >= self.r_occ * ((h + m) as f64);
    }

    pub fn record_hit(&mut self, i: [usize; 3]) {
        let lin = self.linear(i);
        self.hits[lin] += 1;
        self.recompute_occupancy(lin);
    }

    pub fn record_miss(&mut self, i: [usize; 3]) {
        let lin = self.linear(i);
        self.misses[lin] += 1;
        self.recompute_occupancy(lin);
    }

    #[inline]
    pub fn is_occupied(&self, i: [usize; 3]) -> bool {
        self.occupied[self.linear(i)]
    }

    pub fn hit_count(&self, i: [usize; 3]) -> u32 {
        self.hits[self.linear(i)]
    }

    pub fn miss_count(&self, i: [usize; 3]) -> u32 {
        self.misses[self.linear(i)]
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn occupied_voxels(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, _] = self.dims;
        self.occupied.iter().enumerate().filter(|(_, &o)| o).map(move |(lin, _)| {
            let ix = lin % nx;
            let iy = (lin / nx) % ny;
            let iz = lin / (nx * ny);
            [ix, iy, iz]
        })
    }

    /// Fraction of voxels carrying any evidence (hit or miss).
    pub fn sweep_coverage(&self) -> f64 {
        let observed = self
            .hits
            .iter()
            .zip(&self.misses)
            .filter(|(&h, &m)| h + m > 0)
            .count();
        observed as f64 / self.hits.len() as f64
    }

    pub fn diagonal(&self) -> f64 {
        let d = Vector3::new(
            self.dims[0] as f64,
            self.dims[1] as f64,
            self.dims[2] as f64,
        ) * self.resolution;
        d.norm()
    }

    /// Accumulates one scan. Every above-threshold (beam, bin) cell stamps a
    /// hit along its elevation arc; bins strictly before a beam's first
    /// above-threshold bin stamp misses. Voxels are deduplicated per arc, and
    /// samples falling outside the grid are ignored.
    pub fn integrate_scan(
        &mut self,
        scan: &SonarScan,
        intensity_threshold: f64,
    ) -> Result<(), AcousticError> {
        if !scan.pose.is_finite() {
            return Err(AcousticError::NonFinitePose);
        }
        let mut arc_voxels: Vec<usize> = Vec::with_capacity(128);
        for beam in 0..scan.beam_count {
            let first_hit = (0..scan.bin_count)
                .find(|&b| scan.intensity(beam, b) as f64 > intensity_threshold);
            let Some(first_hit) = first_hit else { continue };
            for bin in 0..scan.bin_count {
                let is_hit = scan.intensity(beam, bin) as f64 > intensity_threshold;
                if !is_hit && bin >= first_hit {
                    continue;
                }
                self.collect_arc_voxels(scan, beam, bin, &mut arc_voxels);
                for &lin in &arc_voxels {
                    if is_hit {
                        self.hits[lin] += 1;
                    } else {
                        self.misses[lin] += 1;
                    }
                    self.recompute_occupancy(lin);
                }
            }
        }
        Ok(())
    }

    /// Unique in-grid voxels under the elevation arc of one (beam, bin) cell,
    /// sampled at angular steps of a quarter voxel so none are skipped.
    fn collect_arc_voxels(&self, scan: &SonarScan, beam: usize, bin: usize, out: &mut Vec<usize>) {
        out.clear();
        let range = scan.bin_range(bin);
        let azimuth = scan.beam_azimuth(beam);
        let max_step = 0.25 * self.resolution / range;
        let n = (scan.v_fov / max_step).ceil() as usize + 1;
        let dphi = scan.v_fov / (n - 1).max(1) as f64;
        for s in 0..n {
            let elevation = -0.5 * scan.v_fov + s as f64 * dphi;
            let p_sonar = sonar_direction(azimuth, elevation) * range;
            let p_world = scan.pose.transform_point(&p_sonar);
            if let Some(idx) = self.world_to_index(&p_world) {
                out.push(self.linear(idx));
            }
        }
        out.sort_unstable();
        out.dedup();
    }

    /// First-surface range along a world-frame ray, by exact voxel traversal.
    /// Within the first occupied voxel the surface position is refined to
    /// sub-voxel precision: the returned range is where the ray crosses the
    /// voxel's center plane parallel to the entry face. On a locally flat
    /// surface the first occupied voxel is always entered through the face
    /// the surface hides behind, so that axis is the local surface normal,
    /// at any incidence. For a surface bisecting its voxels (a floor aligned
    /// to the grid like the z=0 workspace floor) the refined range is exact,
    /// where the entry face under-ranges by up to a voxel and the chord
    /// midpoint drifts short at oblique incidence. The estimate is clamped
    /// to the chord through the voxel and to at most one resolution past
    /// entry, and below by half a voxel (the camera may sit inside a surface
    /// voxel). `None` when no occupied voxel lies within `max_range`.
    pub fn cast_depth(
        &self,
        origin_w: &Vector3<f64>,
        dir_w: &Vector3<f64>,
        max_range: f64,
    ) -> Option<f64> {
        let res = self.resolution;
        let lo = self.origin;
        let hi = self.origin
            + Vector3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * res;

        // Clip the ray to the grid's bounding box, remembering which slab
        // bounds the entry (it is the entry face of the first voxel).
        let mut t0 = 0.0f64;
        let mut t1 = max_range;
        let mut entry_axis: Option<usize> = None;
        for k in 0..3 {
            let o = origin_w[k];
            let d = dir_w[k];
            if d.abs() < 1e-15 {
                if o < lo[k] || o > hi[k] {
                    return None;
                }
            } else {
                let inv = 1.0 / d;
                let (ta, tb) = ((lo[k] - o) * inv, (hi[k] - o) * inv);
                let (ta, tb) = if ta <= tb { (ta, tb) } else { (tb, ta) };
                if ta > t0 {
                    t0 = ta;
                    entry_axis = Some(k);
                }
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
        }

        // Voxel containing the entry point (nudged inside to settle boundary
        // cases deterministically).
        let entry = origin_w + dir_w * (t0 + 1e-12);
        let inv_res = 1.0 / res;
        let mut idx = [0isize; 3];
        for k in 0..3 {
            let f = ((entry[k] - lo[k]) * inv_res).floor() as isize;
            idx[k] = f.clamp(0, self.dims[k] as isize - 1);
        }
        let occ = |i: &[isize; 3], grid: &Self| -> bool {
            grid.occupied[(i[2] as usize * grid.dims[1] + i[1] as usize) * grid.dims[0]
                + i[0] as usize]
        };

        let mut step = [0isize; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for k in 0..3 {
            let d = dir_w[k];
            if d > 1e-15 {
                step[k] = 1;
                let next = lo[k] + (idx[k] + 1) as f64 * res;
                t_max[k] = (next - origin_w[k]) / d;
                t_delta[k] = res / d;
            } else if d < -1e-15 {
                step[k] = -1;
                let next = lo[k] + idx[k] as f64 * res;
                t_max[k] = (next - origin_w[k]) / d;
                t_delta[k] = res / -d;
            }
        }

        // Sub-voxel surface estimate: the ray parameter at the occupied
        // voxel's center plane parallel to its entry face, clamped to the
        // chord and to one resolution past entry so the result never strays
        // more than a voxel edge from the true first entry. Without a known
        // entry face (camera inside the voxel) the dominant ray axis stands
        // in.
        let refine = |i: &[isize; 3], t_entry: f64, t_exit: f64, axis: Option<usize>| -> f64 {
            let ax = axis.unwrap_or_else(|| {
                let mut dom = 0;
                for k in 1..3 {
                    if dir_w[k].abs() > dir_w[dom].abs() {
                        dom = k;
                    }
                }
                dom
            });
            let d = dir_w[ax];
            let t = if d.abs() > 1e-15 {
                (lo[ax] + (i[ax] as f64 + 0.5) * res - origin_w[ax]) / d
            } else {
                0.5 * (t_entry + t_exit)
            };
            let hi_t = t_exit.min(t_entry + res).max(t_entry);
            t.clamp(t_entry, hi_t).max(0.5 * res)
        };

        if occ(&idx, self) {
            let exit = t_max[0].min(t_max[1]).min(t_max[2]).min(t1);
            return Some(refine(&idx, t0, exit, entry_axis));
        }

        loop {
            let k = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            let t_cross = t_max[k];
            if t_cross > t1 {
                return None;
            }
            idx[k] += step[k];
            if idx[k] < 0 || idx[k] >= self.dims[k] as isize {
                return None;
            }
            t_max[k] += t_delta[k];
            if occ(&idx, self) {
                let exit = t_max[0].min(t_max[1]).min(t_max[2]).min(t1);
                return Some(refine(&idx, t_cross, exit, Some(k)));
            }
        }
    }

    /// Acoustic depth image: per-pixel first-surface range from the grid.
    /// Marching range defaults to the grid diagonal.
    pub fn render_depth(&self, cam: &PinholeCamera, pose_wc: &RigidTransform) -> DepthImage {
        self.render_depth_with_range(cam, pose_wc, self.diagonal())
    }

    pub fn render_depth_with_range(
        &self,
        cam: &PinholeCamera,
        pose_wc: &RigidTransform,
        max_range: f64,
    ) -> DepthImage {
        let mut out = DepthImage::new_invalid(cam.width, cam.height).expect("validated camera dims");
        let origin = pose_wc.translation;
        for v in 0..cam.height {
            for u in 0..cam.width {
                let (uc, vc) = PinholeCamera::pixel_center(u, v);
                let dir_w = pose_wc.rotation * cam.ray_direction(uc, vc);
                if let Some(d) = self.cast_depth(&origin, &dir_w, max_range) {
                    out.set(u, v, d as f32);
                }
            }
        }
        out
    }

    /// Binary grid file, little-endian: magic "OAGR", u32 version, origin as
    /// 3 f64, f64 resolution, dims as 3 u32, u32 k_hit, f64 r_occ, occupancy
    /// as alternating u32 run lengths (starting with a free run), then raw
    /// u32 hit and miss counts.
    pub fn save(&self, path: &Path) -> Result<(), AcousticError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(GRID_MAGIC)?;
        f.write_all(&GRID_VERSION.to_le_bytes())?;
        for k in 0..3 {
            f.write_all(&self.origin[k].to_le_bytes())?;
        }
        f.write_all(&self.resolution.to_le_bytes())?;
        for &d in &self.dims {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        f.write_all(&self.k_hit.to_le_bytes())?;
        f.write_all(&self.r_occ.to_le_bytes())?;

        let runs = rle_encode(&self.occupied);
        f.write_all(&(runs.len() as u32).to_le_bytes())?;
        for r in runs {
            f.write_all(&r.to_le_bytes())?;
        }
        for &h in &self.hits {
            f.write_all(&h.to_le_bytes())?;
        }
        for &m in &self.misses {
            f.write_all(&m.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AcousticError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(AcousticError::BadFile("bad magic".into()));
        }
        let version = read_u32(&mut f)?;
        if version != GRID_VERSION {
            return Err(AcousticError::BadFile(format!("unsupported version {version}")));
        }
        let origin = Vector3::new(read_f64(&mut f)?, read_f64(&mut f)?, read_f64(&mut f)?);
        let resolution = read_f64(&mut f)?;
        let dims = [
            read_u32(&mut f)? as usize,
            read_u32(&mut f)? as usize,
            read_u32(&mut f)? as usize,
        ];
        let k_hit = read_u32(&mut f)?;
        let r_occ = read_f64(&mut f)?;
        let mut grid = Self::with_rule(origin, resolution, dims, k_hit, r_occ)
            .map_err(|e| AcousticError::BadFile(e.to_string()))?;
        let total = grid.hits.len();

        let run_count = read_u32(&mut f)? as usize;
        let mut occupied = Vec::with_capacity(total);
        let mut value = false;
        for _ in 0..run_count {
            let run = read_u32(&mut f)? as usize;
            if occupied.len() + run > total {
                return Err(AcousticError::BadFile("occupancy runs exceed grid size".into()));
            }
            occupied.extend(std::iter::repeat(value).take(run));
            value = !value;
        }
        if occupied.len() != total {
            return Err(AcousticError::BadFile("occupancy runs do not cover grid".into()));
        }
        for h in grid.hits.iter_mut() {
            *h = read_u32(&mut f)?;
        }
        for m in grid.misses.iter_mut() {
            *m = read_u32(&mut f)?;
        }
        // Counts are authoritative; the stored occupancy must agree.
        for lin in 0..total {
            grid.recompute_occupancy(lin);
            if grid.occupied[lin] != occupied[lin] {
                return Err(AcousticError::BadFile(format!(
                    "occupancy at voxel {lin} inconsistent with counts"
                )));
            }
        }
        Ok(grid)
    }
}

const GRID_MAGIC: &[u8; 4] = b"OAGR";
const GRID_VERSION: u32 = 1;

fn rle_encode(bits: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut value = false;
    let mut run: u32 = 0;
    for &b in bits {
        if b == value {
            run += 1;
            if run == u32::MAX {
                runs.push(run);
                runs.push(0);
                run = 0;
            }
        } else {
            runs.push(run);
            value = b;
            run = 1;
        }
    }
    runs.push(run);
    runs
}

/// Direction of a sonar sample in the sensor frame (+z forward, +x right,
/// +y down): azimuth rotates toward +x, elevation toward +y.
#[inline]
pub fn sonar_direction(azimuth: f64, elevation: f64) -> Vector3<f64> {
    let (sa, ca) = azimuth.sin_cos();
    let (se, ce) = elevation.sin_cos();
    Vector3::new(ce * sa, se, ce * ca)
}

/// One multibeam sonar ping: beams × range_bins intensities with the
/// world-from-sonar pose at capture time.
#[derive(Debug, Clone, PartialEq)]
pub struct SonarScan {
    pub intensities: Vec<f32>,
    pub pose: RigidTransform,
    pub h_fov: f64,
    pub v_fov: f64,
    pub max_range: f64,
    pub beam_count: usize,
    pub bin_count: usize,
}

impl SonarScan {
    pub fn new(
        beam_count: usize,
        bin_count: usize,
        h_fov: f64,
        v_fov: f64,
        max_range: f64,
        pose: RigidTransform,
    ) -> Result<Self, AcousticError> {
        if beam_count == 0 || bin_count == 0 {
            return Err(AcousticError::BadScan(format!(
                "beam_count={beam_count}, bin_count={bin_count}"
            )));
        }
        for (name, fov) in [("h_fov", h_fov), ("v_fov", v_fov)] {
            if !(fov > 0.0 && fov <= std::f64::consts::PI) {
                return Err(AcousticError::BadScan(format!("{name}={fov}")));
            }
        }
        if !(max_range > 0.0) || !max_range.is_finite() {
            return Err(AcousticError::BadScan(format!("max_range={max_range}")));
        }
        Ok(Self {
            intensities: vec![0.0; beam_count * bin_count],
            pose,
            h_fov,
            v_fov,
            max_range,
            beam_count,
            bin_count,
        })
    }

    #[inline]
    pub fn intensity(&self, beam: usize, bin: usize) -> f32 {
        self.intensities[beam * self.bin_count + bin]
    }

    #[inline]
    pub fn set_intensity(&mut self, beam: usize, bin: usize, value: f32) {
        self.intensities[beam * self.bin_count + bin] = value;
    }

    /// Representative range of bin b: (b + 0.5) · max_range / bin_count.
    #[inline]
    pub fn bin_range(&self, bin: usize) -> f64 {
        (bin as f64 + 0.5) * self.max_range / self.bin_count as f64
    }

    /// Azimuth of beam m, centered in its angular slot across h_fov.
    #[inline]
    pub fn beam_azimuth(&self, beam: usize) -> f64 {
        -0.5 * self.h_fov + (beam as f64 + 0.5) * self.h_fov / self.beam_count as f64
    }

    /// Range bin index for a measured range, if within [0, max_range).
    #[inline]
    pub fn bin_of_range(&self, range: f64) -> Option<usize> {
        if range < 0.0 || range >= self.max_range {
            return None;
        }
        Some(((range / self.max_range) * self.bin_count as f64) as usize)
    }

    /// Binary scan file, little-endian: magic "SONR", u32 version, u32 beam
    /// and bin counts, f64 h_fov, v_fov, max_range, pose as tx ty tz qx qy
    /// qz qw (7 f64), then beam-major f32 intensities.
    pub fn save(&self, path: &Path) -> Result<(), AcousticError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(SCAN_MAGIC)?;
        f.write_all(&SCAN_VERSION.to_le_bytes())?;
        f.write_all(&(self.beam_count as u32).to_le_bytes())?;
        f.write_all(&(self.bin_count as u32).to_le_bytes())?;
        for v in [self.h_fov, self.v_fov, self.max_range] {
            f.write_all(&v.to_le_bytes())?;
        }
        let (t, qx, qy, qz, qw) = self.pose.to_quaternion();
        for v in [t.x, t.y, t.z, qx, qy, qz, qw] {
            f.write_all(&v.to_le_bytes())?;
        }
        for &i in &self.intensities {
            f.write_all(&i.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AcousticError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != SCAN_MAGIC {
            return Err(AcousticError::BadFile("bad magic".into()));
        }
        let version = read_u32(&mut f)?;
        if version != SCAN_VERSION {
            return Err(AcousticError::BadFile(format!("unsupported version {version}")));
        }
        let beam_count = read_u32(&mut f)? as usize;
        let bin_count = read_u32(&mut f)? as usize;
        let h_fov = read_f64(&mut f)?;
        let v_fov = read_f64(&mut f)?;
        let max_range = read_f64(&mut f)?;
        let mut p = [0.0f64; 7];
        for v in p.iter_mut() {
            *v = read_f64(&mut f)?;
        }
        let pose =
            RigidTransform::from_quaternion(Vector3::new(p[0], p[1], p[2]), p[3], p[4], p[5], p[6]);
        let mut scan = Self::new(beam_count, bin_count, h_fov, v_fov, max_range, pose)
            .map_err(|e| AcousticError::BadFile(e.to_string()))?;
        let mut buf = [0u8; 4];
        for i in scan.intensities.iter_mut() {
            f.read_exact(&mut buf)?;
            *i = f32::from_le_bytes(buf);
        }
        Ok(scan)
    }
}

const SCAN_MAGIC: &[u8; 4] = b"SONR";
const SCAN_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32, AcousticError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, AcousticError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_grid() -> OccupancyGrid {
        OccupancyGrid::new(Vector3::new(-1.0, -1.0, -1.0), 0.05, [40, 40, 40]).unwrap()
    }

    /// Independent first-surface oracle: march at fixed fine steps and report
    /// the first sample inside an occupied voxel.
    fn fine_march(
        grid: &OccupancyGrid,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        max_range: f64,
        step: f64,
    ) -> Option<f64> {
        let mut t = 0.5 * step;
        while t <= max_range {
            let p = origin + dir * t;
            if let Some(idx) = grid.world_to_index(&p) {
                if grid.is_occupied(idx) {
                    return Some(t);
                }
            }
            t += step;
        }
        None
    }

    #[test]
    fn index_round_trip() {
        let grid = small_grid();
        for i in [[0, 0, 0], [39, 39, 39], [7, 23, 11], [20, 0, 39]] {
            let c = grid.index_to_world_center(i);
            assert_eq!(grid.world_to_index(&c), Some(i));
        }
        assert_eq!(grid.world_to_index(&Vector3::new(-1.001, 0.0, 0.0)), None);
        assert_eq!(grid.world_to_index(&Vector3::new(1.0, 0.0, 0.0)), None);
    }

    #[test]
    fn occupancy_rule_boundaries() {
        let mut grid = small_grid();
        assert_eq!((grid.k_hit, grid.r_occ), (8, 0.9));
        let i = [5, 5, 5];
        for _ in 0..7 {
            grid.record_hit(i);
        }
        assert!(!grid.is_occupied(i), "below k_hit");
        grid.record_hit(i);
        assert!(grid.is_occupied(i), "8 hits, no misses");
        // 9 hits, 1 miss: ratio exactly 0.9 stays occupied (inclusive).
        grid.record_hit(i);
        grid.record_miss(i);
        assert!(grid.is_occupied(i));
        grid.record_miss(i);
        assert!(!grid.is_occupied(i), "ratio 9/11 below 0.9");
    }

    #[test]
    fn integrate_all_zero_changes_nothing() {
        let mut grid = small_grid();
        let scan = SonarScan::new(
            64,
            32,
            2.0,
            0.35,
            2.0,
            RigidTransform::identity(),
        )
        .unwrap();
        let before = grid.clone();
        grid.integrate_scan(&scan, 0.5).unwrap();
        assert_eq!(grid, before);
    }

    #[test]
    fn integrate_rejects_non_finite_pose() {
        let mut grid = small_grid();
        let mut scan =
            SonarScan::new(4, 4, 2.0, 0.35, 2.0, RigidTransform::identity()).unwrap();
        scan.pose.translation.x = f64::NAN;
        assert!(matches!(
            grid.integrate_scan(&scan, 0.5),
            Err(AcousticError::NonFinitePose)
        ));
    }

    #[test]
    fn single_cell_stamps_each_arc_voxel_once() {
        // Sonar deliberately offset from voxel boundaries.
        let pose = RigidTransform::new(
            nalgebra::Matrix3::identity(),
            Vector3::new(0.013, -0.007, 0.017),
        );
        let mut grid =
            OccupancyGrid::new(Vector3::new(-2.0, -2.0, -2.0), 0.05, [80, 80, 80]).unwrap();
        let mut scan = SonarScan::new(
            64,
            40,
            130f64.to_radians(),
            20f64.to_radians(),
            2.0,
            pose,
        )
        .unwrap();
        // Broadside beam: azimuth nearest zero. Bin with range 1.0 m: bin 19
        // has range (19.5/40)*2.0 = 0.975; bin 20 -> 1.025. Use bin 19.
        let beam = 31; // azimuth -0.5*h + 31.5*h/64 slightly below 0
        let bin = 19;
        scan.set_intensity(beam, bin, 5.0);
        grid.integrate_scan(&scan, 1.0).unwrap();

        // Oracle: enumerate the same arc at 1 mm spacing, collect unique voxels.
        let range = scan.bin_range(bin);
        let azimuth = scan.beam_azimuth(beam);
        let n = (scan.v_fov * range / 0.001).ceil() as usize + 1;
        let mut expected: Vec<[usize; 3]> = Vec::new();
        for s in 0..=n {
            let phi = -0.5 * scan.v_fov + s as f64 * scan.v_fov / n as f64;
            let p = pose.transform_point(&(sonar_direction(azimuth, phi) * range));
            if let Some(i) = grid.world_to_index(&p) {
                expected.push(i);
            }
        }
        expected.sort_unstable();
        expected.dedup();
        assert!(expected.len() > 5, "arc should span multiple voxels");

        let hit_voxels: Vec<[usize; 3]> = (0..grid.dims[2])
            .flat_map(|iz| (0..grid.dims[1]).flat_map(move |iy| (0..grid.dims[0]).map(move |ix| [ix, iy, iz])))
            .filter(|&i| grid.hit_count(i) > 0)
            .collect();
        assert_eq!(hit_voxels, expected);
        for &i in &hit_voxels {
            assert_eq!(grid.hit_count(i), 1);
        }
    }

    #[test]
    fn double_integration_doubles_counts_monotonically() {
        let mut grid = small_grid();
        let mut scan = SonarScan::new(
            32,
            24,
            1.5,
            0.3,
            1.8,
            RigidTransform::identity(),
        )
        .unwrap();
        for beam in 0..32 {
            scan.set_intensity(beam, 8 + beam % 5, 4.0);
        }
        grid.integrate_scan(&scan, 1.0).unwrap();
        let once = grid.clone();
        grid.integrate_scan(&scan, 1.0).unwrap();

        let mut was_occupied_flipped_free = false;
        for iz in 0..grid.dims[2] {
            for iy in 0..grid.dims[1] {
                for ix in 0..grid.dims[0] {
                    let i = [ix, iy, iz];
                    assert_eq!(grid.hit_count(i), 2 * once.hit_count(i));
                    assert_eq!(grid.miss_count(i), 2 * once.miss_count(i));
                    if once.is_occupied(i) && !grid.is_occupied(i) {
                        was_occupied_flipped_free = true;
                    }
                }
            }
        }
        assert!(!was_occupied_flipped_free);
    }

    #[test]
    fn integration_is_order_independent() {
        let pose_a = RigidTransform::new(nalgebra::Matrix3::identity(), Vector3::new(0.1, 0.0, 0.0));
        let pose_b = RigidTransform::from_axis_angle(
            Vector3::z(),
            0.4,
            Vector3::new(-0.2, 0.1, 0.05),
        );
        let mut scan_a = SonarScan::new(24, 20, 1.2, 0.3, 1.5, pose_a).unwrap();
        let mut scan_b = SonarScan::new(24, 20, 1.2, 0.3, 1.5, pose_b).unwrap();
        for beam in 0..24 {
            scan_a.set_intensity(beam, 10, 3.0);
            scan_b.set_intensity(beam, 6 + beam % 7, 3.0);
        }
        let mut g1 = small_grid();
        g1.integrate_scan(&scan_a, 1.0).unwrap();
        g1.integrate_scan(&scan_b, 1.0).unwrap();
        let mut g2 = small_grid();
        g2.integrate_scan(&scan_b, 1.0).unwrap();
        g2.integrate_scan(&scan_a, 1.0).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn render_empty_grid_all_invalid() {
        let grid = small_grid();
        let cam = PinholeCamera::new(50.0, 50.0, 16.0, 12.0, 32, 24).unwrap();
        let d = grid.render_depth(&cam, &RigidTransform::identity());
        assert_eq!(d.valid_count(), 0);
    }

    #[test]
    fn render_single_voxel_on_principal_ray() {
        // Voxel centered exactly 1.0 m down the principal ray: grid origin
        // chosen so (0,0,1) is a voxel center.
        let mut grid =
            OccupancyGrid::new(Vector3::new(-0.475, -0.475, 0.025), 0.05, [19, 19, 39]).unwrap();
        let idx = grid.world_to_index(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(
            grid.index_to_world_center(idx),
            Vector3::new(0.0, 0.0, 1.0),
            epsilon = 1e-12
        );
        for _ in 0..grid.k_hit {
            grid.record_hit(idx);
        }
        let cam = PinholeCamera::new(60.0, 60.0, 32.0, 24.0, 64, 48).unwrap();
        let depth = grid.render_depth(&cam, &RigidTransform::identity());
        let center = depth.get(32, 24) as f64;
        assert!(
            (0.975..=1.025).contains(&center),
            "principal depth {center} outside voxel span"
        );
        let oracle = fine_march(
            &grid,
            &Vector3::zeros(),
            &Vector3::z(),
            3.0,
            0.001,
        )
        .unwrap();
        assert!((center - oracle).abs() <= 0.05, "fast {center} vs fine {oracle}");
    }

    #[test]
    fn camera_inside_occupied_voxel_reports_half_step() {
        let mut grid = small_grid();
        let idx = grid.world_to_index(&Vector3::zeros()).unwrap();
        for _ in 0..grid.k_hit {
            grid.record_hit(idx);
        }
        // Camera at the voxel center, strictly inside the occupied voxel.
        let pose = RigidTransform::new(
            nalgebra::Matrix3::identity(),
            grid.index_to_world_center(idx),
        );
        let cam = PinholeCamera::new(20.0, 20.0, 8.0, 6.0, 16, 12).unwrap();
        let d = grid.render_depth(&cam, &pose);
        for v in 0..12 {
            for u in 0..16 {
                assert_eq!(d.get(u, v), 0.025, "pixel ({u},{v})");
            }
        }
    }

    #[test]
    fn cast_depth_matches_fine_march_on_random_grids() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for case in 0..30 {
            let mut grid = OccupancyGrid::new(
                Vector3::new(-0.8, -0.8, -0.8),
                0.08,
                [20, 20, 20],
            )
            .unwrap();
            for _ in 0..rng.gen_range(3..40) {
                let i = [
                    rng.gen_range(0..20),
                    rng.gen_range(0..20),
                    rng.gen_range(0..20),
                ];
                for _ in 0..grid.k_hit {
                    grid.record_hit(i);
                }
            }
            for _ in 0..40 {
                let origin = Vector3::new(
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                );
                let dir = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                if dir.norm() < 1e-3 {
                    continue;
                }
                let dir = dir.normalize();
                let fast = grid.cast_depth(&origin, &dir, 5.0);
                let fine = fine_march(&grid, &origin, &dir, 5.0, 0.008);
                match (fast, fine) {
                    (Some(a), Some(b)) => assert!(
                        (a - b).abs() <= 0.08,
                        "case {case}: fast {a} vs fine {b}"
                    ),
                    (None, None) => {}
                    // The fine march may clip a corner the exact traversal
                    // legitimately reports too; the reverse (fine finds,
                    // fast misses) is a traversal bug.
                    (Some(_), None) => {}
                    (None, Some(b)) => panic!("case {case}: fine march hit at {b}, fast missed"),
                }
            }
        }
    }

    #[test]
    fn coverage_fresh_and_saturated() {
        let mut grid = OccupancyGrid::new(Vector3::zeros(), 0.1, [4, 4, 4]).unwrap();
        assert_eq!(grid.sweep_coverage(), 0.0);
        for iz in 0..4 {
            for iy in 0..4 {
                for ix in 0..4 {
                    grid.record_miss([ix, iy, iz]);
                }
            }
        }
        assert_eq!(grid.sweep_coverage(), 1.0);
    }

    #[test]
    fn coverage_matches_sector_volume() {
        // Fan of 1.5 m max range: every beam returns in the last bin, so the
        // whole sector accumulates evidence. Compare voxelized volume with
        // the analytic spherical-sector volume. Boundary-voxel inflation
        // scales with surface * resolution / volume, so the resolution must
        // be fine relative to the sector.
        let res = 0.0125;
        let max_range = 1.5;
        let mut grid =
            OccupancyGrid::new(Vector3::new(-1.4, -0.3, -0.05), res, [224, 48, 128]).unwrap();
        let h_fov = 130f64.to_radians();
        let v_fov = 20f64.to_radians();
        let pose = RigidTransform::new(
            nalgebra::Matrix3::identity(),
            Vector3::new(0.004, -0.003, 0.002),
        );
        let mut scan = SonarScan::new(512, 160, h_fov, v_fov, max_range, pose).unwrap();
        for beam in 0..512 {
            scan.set_intensity(beam, 159, 5.0);
        }
        grid.integrate_scan(&scan, 1.0).unwrap();

        let total_voxels = (224 * 48 * 128) as f64;
        let observed_volume = grid.sweep_coverage() * total_voxels * res.powi(3);
        let analytic = h_fov * (max_range.powi(3) / 3.0) * 2.0 * (0.5 * v_fov).sin();
        let rel = (observed_volume - analytic).abs() / analytic;
        assert!(
            rel < 0.10,
            "voxelized {observed_volume:.4} vs analytic {analytic:.4} (rel {rel:.3})"
        );
    }

    #[test]
    fn grid_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.grid");
        let mut grid = OccupancyGrid::new(Vector3::new(-0.6, 0.2, -1.3), 0.05, [12, 9, 7]).unwrap();
        let mut scan = SonarScan::new(16, 12, 1.0, 0.3, 1.2, RigidTransform::identity()).unwrap();
        for beam in 0..16 {
            scan.set_intensity(beam, 4 + beam % 6, 3.0);
        }
        for _ in 0..3 {
            grid.integrate_scan(&scan, 1.0).unwrap();
        }
        grid.save(&path).unwrap();
        let back = OccupancyGrid::load(&path).unwrap();
        assert_eq!(back, grid);
    }

    #[test]
    fn scan_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ping.scan");
        let pose = RigidTransform::from_axis_angle(
            Vector3::new(0.1, 0.9, 0.2),
            0.7,
            Vector3::new(0.5, -0.25, 1.0),
        );
        let mut scan = SonarScan::new(8, 6, 1.9, 0.35, 2.0, pose).unwrap();
        for b in 0..8 {
            for r in 0..6 {
                scan.set_intensity(b, r, (b * 6 + r) as f32 * 0.5);
            }
        }
        scan.save(&path).unwrap();
        let back = SonarScan::load(&path).unwrap();
        assert_eq!(back.intensities, scan.intensities);
        assert_abs_diff_eq!(back.pose.rotation, scan.pose.rotation, epsilon = 1e-9);
        assert_abs_diff_eq!(back.pose.translation, scan.pose.translation, epsilon = 1e-12);
        assert_eq!(back.beam_count, 8);
        assert_eq!(back.bin_count, 6);
    }

    #[test]
    fn bin_range_convention() {
        let scan = SonarScan::new(4, 96, 1.0, 0.3, 2.0, RigidTransform::identity()).unwrap();
        assert_abs_diff_eq!(scan.bin_range(0), 0.5 * 2.0 / 96.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scan.bin_range(95), 95.5 * 2.0 / 96.0, epsilon = 1e-12);
        assert_eq!(scan.bin_of_range(0.99), Some(47));
        assert_eq!(scan.bin_of_range(2.0), None);
    }
}
