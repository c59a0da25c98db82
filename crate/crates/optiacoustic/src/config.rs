//! Run configuration: thresholds, RANSAC and matching settings, grid and
//! sensor geometry, provider selection, and seeds, loadable from a TOML
//! file. Every key has a default, so a config file only needs the keys it
//! overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, PinholeCamera};
use crate::pointmap::MatchParams;
use crate::scale::RansacConfig;
use crate::sim::SonarParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Decision thresholds. The recovery threshold must sit strictly below the
/// keyframe threshold, otherwise every tracked frame would either spawn a
/// keyframe or drop to recovery with no stable band between.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Keyframe promotion: promote when min(alpha_match, alpha_unique) < tau_k.
    pub tau_k: f64,
    /// Edge creation: keep an edge when its match fraction exceeds tau_f.
    pub tau_f: f64,
    /// Per-pixel confidence gate on matches and exported points.
    pub tau_c: f64,
    /// Feature-reliability gate on sqrt(q_f * q_k).
    pub tau_q: f64,
    /// Recovery entry: tracking drops out when alpha_match < tau_r.
    pub tau_r: f64,
    /// Initialization: a frame seeds the map when max confidence > tau_i.
    pub tau_i: f64,
    /// Pose-prior weight in component optimization.
    pub w_prior: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            tau_k: crate::graph::DEFAULT_TAU_K,
            tau_f: crate::graph::DEFAULT_TAU_F,
            tau_c: crate::graph::DEFAULT_TAU_C,
            tau_q: crate::graph::DEFAULT_TAU_Q,
            tau_r: 0.05,
            tau_i: 2.0,
            w_prior: crate::graph::DEFAULT_W_PRIOR,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacSection {
    pub iterations: usize,
    pub epsilon_in: f64,
    pub min_inlier_fraction: f64,
}

impl Default for RansacSection {
    fn default() -> Self {
        let r = RansacConfig::default();
        RansacSection {
            iterations: r.iterations,
            epsilon_in: r.epsilon_in,
            min_inlier_fraction: r.min_inlier_fraction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchSection {
    /// Depth agreement gate, as a fraction of the keyframe depth.
    pub delta_depth: f64,
    /// Minimum feature cosine similarity for a match.
    pub rho_feat: f64,
}

impl Default for MatchSection {
    fn default() -> Self {
        let m = MatchParams::default();
        MatchSection { delta_depth: m.delta_depth, rho_feat: m.rho_feat }
    }
}

/// Occupancy grid geometry: a world-frame axis-aligned box discretized at
/// `resolution`. The default box covers the benchmark workspace.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSection {
    pub resolution: f64,
    pub k_hit: u32,
    pub r_occ: f64,
    pub origin: [f64; 3],
    pub extent: [f64; 3],
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            resolution: 0.05,
            k_hit: crate::acoustic::DEFAULT_K_HIT,
            r_occ: crate::acoustic::DEFAULT_R_OCC,
            // z offset of half a voxel keeps the z=0 workspace floor at the
            // center of the bottom voxel layer instead of on a layer
            // boundary, where mid-chord ray ranges would read half a voxel
            // short and sub-floor voxels could never be carved free.
            origin: [-1.0, -1.0, -0.025],
            extent: [2.0, 2.0, 0.85],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSection {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraSection {
    fn default() -> Self {
        CameraSection { width: 512, height: 384, fx: 420.0, fy: 420.0, cx: 256.0, cy: 192.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SonarSection {
    pub beam_count: usize,
    pub bin_count: usize,
    pub h_fov_deg: f64,
    pub v_fov_deg: f64,
    pub max_range: f64,
    pub gain: f64,
    pub elev_samples: usize,
    /// Intensity threshold above which a bin counts as a hit.
    pub hit_threshold: f64,
}

impl Default for SonarSection {
    fn default() -> Self {
        let s = SonarParams::default();
        SonarSection {
            beam_count: s.beam_count,
            bin_count: s.bin_count,
            h_fov_deg: s.h_fov.to_degrees(),
            v_fov_deg: s.v_fov.to_degrees(),
            max_range: s.max_range,
            gain: s.gain,
            elev_samples: s.elev_samples,
            hit_threshold: 0.0,
        }
    }
}

/// Which pointmap provider the pipeline runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderSection {
    /// "oracle", "replay", or "external".
    pub kind: String,
    /// External provider command line (kind = "external").
    pub command: String,
    /// Prediction cache directory (kind = "replay", or caching wrapper).
    pub cache_dir: String,
    /// External provider response timeout.
    pub timeout_ms: u64,
    /// Oracle noise settings.
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    /// Injected scale range for the oracle; [1, 1] disables scale ambiguity.
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for ProviderSection {
    fn default() -> Self {
        ProviderSection {
            kind: "oracle".into(),
            command: String::new(),
            cache_dir: String::new(),
            timeout_ms: 10_000,
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            scale_min: 0.25,
            scale_max: 4.0,
        }
    }
}

/// Bounds on per-frame work, keeping replay deterministic and real-time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LimitsSection {
    /// Depth-pair subsample cap fed to RANSAC.
    pub max_depth_pairs: usize,
    /// Stored matches per graph edge.
    pub max_edge_matches: usize,
    /// Gauss-Newton iteration cap per component.
    pub max_optimizer_iterations: usize,
}

impl Default for LimitsSection {
    fn default() -> Self {
        LimitsSection {
            max_depth_pairs: 20_000,
            max_edge_matches: crate::graph::MAX_EDGE_MATCHES,
            max_optimizer_iterations: 15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub thresholds: Thresholds,
    pub ransac: RansacSection,
    pub matching: MatchSection,
    pub grid: GridSection,
    pub camera: CameraSection,
    pub sonar: SonarSection,
    pub provider: ProviderSection,
    pub limits: LimitsSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, toml::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.thresholds;
        if !(t.tau_r < t.tau_k) {
            return Err(ConfigError::Invalid(format!(
                "tau_r ({}) must be strictly below tau_k ({})",
                t.tau_r, t.tau_k
            )));
        }
        for (name, v) in [
            ("tau_k", t.tau_k),
            ("tau_f", t.tau_f),
            ("tau_c", t.tau_c),
            ("tau_q", t.tau_q),
            ("tau_r", t.tau_r),
            ("tau_i", t.tau_i),
            ("w_prior", t.w_prior),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(ConfigError::Invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if self.ransac.iterations == 0 {
            return Err(ConfigError::Invalid("ransac.iterations must be > 0".into()));
        }
        if !(self.ransac.epsilon_in > 0.0) {
            return Err(ConfigError::Invalid("ransac.epsilon_in must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ransac.min_inlier_fraction) {
            return Err(ConfigError::Invalid("ransac.min_inlier_fraction must be in [0, 1]".into()));
        }
        if !(self.grid.resolution > 0.0) {
            return Err(ConfigError::Invalid("grid.resolution must be > 0".into()));
        }
        if self.grid.k_hit == 0 {
            return Err(ConfigError::Invalid("grid.k_hit must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.grid.r_occ) {
            return Err(ConfigError::Invalid("grid.r_occ must be in [0, 1]".into()));
        }
        if self.grid.extent.iter().any(|&e| !(e > 0.0)) {
            return Err(ConfigError::Invalid("grid.extent must be positive".into()));
        }
        if self.camera.width == 0 || self.camera.height == 0 {
            return Err(ConfigError::Invalid("camera dimensions must be nonzero".into()));
        }
        if !matches!(self.provider.kind.as_str(), "oracle" | "replay" | "external") {
            return Err(ConfigError::Invalid(format!(
                "provider.kind must be oracle, replay, or external (got {:?})",
                self.provider.kind
            )));
        }
        if self.provider.scale_min > self.provider.scale_max || self.provider.scale_min <= 0.0 {
            return Err(ConfigError::Invalid("provider scale range must be 0 < min <= max".into()));
        }
        if self.limits.max_depth_pairs == 0 || self.limits.max_edge_matches == 0 {
            return Err(ConfigError::Invalid("limits must be nonzero".into()));
        }
        Ok(())
    }

    pub fn pinhole(&self) -> Result<PinholeCamera, ConfigError> {
        Ok(PinholeCamera::new(
            self.camera.fx,
            self.camera.fy,
            self.camera.cx,
            self.camera.cy,
            self.camera.width,
            self.camera.height,
        )?)
    }

    pub fn sonar_params(&self) -> SonarParams {
        SonarParams {
            beam_count: self.sonar.beam_count,
            bin_count: self.sonar.bin_count,
            h_fov: self.sonar.h_fov_deg.to_radians(),
            v_fov: self.sonar.v_fov_deg.to_radians(),
            max_range: self.sonar.max_range,
            gain: self.sonar.gain,
            elev_samples: self.sonar.elev_samples,
        }
    }

    pub fn ransac_config(&self) -> RansacConfig {
        RansacConfig {
            iterations: self.ransac.iterations,
            epsilon_in: self.ransac.epsilon_in,
            min_inlier_fraction: self.ransac.min_inlier_fraction,
            seed: self.seed,
        }
    }

    pub fn match_params(&self) -> MatchParams {
        MatchParams { delta_depth: self.matching.delta_depth, rho_feat: self.matching.rho_feat }
    }

    /// Grid dimensions implied by extent and resolution, rounded up so the
    /// requested extent is fully covered.
    pub fn grid_dims(&self) -> [usize; 3] {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            dims[a] = (self.grid.extent[a] / self.grid.resolution).ceil().max(1.0) as usize;
        }
        dims
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.toml");
        cfg.save(&path).unwrap();
        let back = Config::load(&path).unwrap();
        assert_eq!(back.thresholds.tau_k, cfg.thresholds.tau_k);
        assert_eq!(back.grid.resolution, cfg.grid.resolution);
        assert_eq!(back.provider.kind, "oracle");
        assert_eq!(back.sonar.beam_count, 512);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("partial.toml");
        std::fs::write(&path, "seed = 9\n[thresholds]\ntau_k = 0.4\n").unwrap();
        let cfg = Config::load(&path).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.thresholds.tau_k, 0.4);
        // untouched keys keep their defaults
        assert_eq!(cfg.thresholds.tau_c, 1.5);
        assert_eq!(cfg.ransac.iterations, 200);
    }

    #[test]
    fn recovery_threshold_must_stay_below_keyframe_threshold() {
        let mut cfg = Config::default();
        cfg.thresholds.tau_r = cfg.thresholds.tau_k;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
        cfg.thresholds.tau_r = cfg.thresholds.tau_k + 0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_sections_are_rejected() {
        let mut cfg = Config::default();
        cfg.grid.resolution = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = Config::default();
        cfg.provider.kind = "neural".into();
        assert!(cfg.validate().is_err());

        let mut cfg = Config::default();
        cfg.ransac.min_inlier_fraction = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grid_dims_cover_extent() {
        let cfg = Config::default();
        let dims = cfg.grid_dims();
        assert_eq!(dims, [40, 40, 17]);
        for a in 0..3 {
            assert!(dims[a] as f64 * cfg.grid.resolution >= cfg.grid.extent[a] - 1e-12);
        }
    }
}
