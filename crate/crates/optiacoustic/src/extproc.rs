//! Out-of-process pointmap providers. The pipeline accepts any
//! [`PointmapProvider`]; the adapters here let the predictor live outside
//! the process: [`ExternalProcessProvider`] speaks a line protocol with a
//! child process, [`CachingProvider`] records every prediction to disk, and
//! [`ReplayProvider`] serves a recorded cache back without the original
//! provider.
//!
//! Protocol, one exchange per prediction over the child's standard streams:
//!
//! ```text
//! -> PREDICT <image_i> <image_j>
//! <- OK <cache_file>
//! <- ERR <message>
//! ```
//!
//! Image paths are composed from the dataset layout (`frames/NNNNNN.png`)
//! and contain no whitespace as long as the dataset directory does not. A
//! response that is late, malformed, or points at an unreadable cache file
//! fails only that prediction; the pipeline skips the frame and continues.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::dataset::frame_rel_path;
use crate::pointmap::{
    load_prediction, save_prediction, FrameInput, PointmapError, PointmapPrediction,
    PointmapProvider,
};

/// Cache file name for the prediction of frame pair `(i, j)`.
pub fn pair_cache_name(id_i: u64, id_j: u64) -> String {
    format!("{id_i:06}_{id_j:06}.pmpc")
}

/// Bridges the provider seam to a child process over standard streams.
///
/// Responses arrive in request order, so after a timeout the stream still
/// holds a response for the abandoned request; `outstanding` counts those
/// and later calls discard them before trusting a line.
pub struct ExternalProcessProvider {
    program: String,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: mpsc::Receiver<String>,
    reader: Option<JoinHandle<()>>,
    dataset_dir: PathBuf,
    timeout: Duration,
    outstanding: usize,
}

impl ExternalProcessProvider {
    /// Spawns `program args...`; `dataset_dir` is the dataset root whose
    /// `frames/NNNNNN.png` entries name the images in requests.
    pub fn new(
        program: &str,
        args: &[String],
        dataset_dir: &Path,
        timeout: Duration,
    ) -> Result<ExternalProcessProvider, PointmapError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| PointmapError::Provider(format!("spawn {program}: {e}")))?;
        let stdin = child.stdin.take();
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| PointmapError::Provider("child stdout unavailable".into()))?;
        let (tx, rx) = mpsc::channel();
        let reader = std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                match line {
                    Ok(l) => {
                        if tx.send(l).is_err() {
                            break;
                        }
                    }
                    Err(_) => break,
                }
            }
        });
        Ok(ExternalProcessProvider {
            program: program.to_string(),
            child,
            stdin,
            lines: rx,
            reader: Some(reader),
            dataset_dir: dataset_dir.to_path_buf(),
            timeout,
            outstanding: 0,
        })
    }

    fn image_path(&self, frame: &FrameInput) -> PathBuf {
        self.dataset_dir.join(frame_rel_path(frame.id as usize))
    }

    fn parse_response(&self, line: &str) -> Result<PointmapPrediction, PointmapError> {
        let line = line.trim_end_matches('\r');
        if let Some(path) = line.strip_prefix("OK ") {
            return load_prediction(Path::new(path.trim()));
        }
        if let Some(msg) = line.strip_prefix("ERR") {
            return Err(PointmapError::Provider(format!(
                "{} reported: {}",
                self.program,
                msg.trim()
            )));
        }
        Err(PointmapError::Provider(format!(
            "malformed response from {}: {line:?}",
            self.program
        )))
    }
}

impl PointmapProvider for ExternalProcessProvider {
    fn predict(
        &mut self,
        frame_i: &FrameInput,
        frame_j: &FrameInput,
    ) -> Result<PointmapPrediction, PointmapError> {
        // Discard responses to requests that timed out earlier.
        while self.outstanding > 0 {
            match self.lines.try_recv() {
                Ok(_) => self.outstanding -= 1,
                Err(_) => break,
            }
        }
        let request = format!(
            "PREDICT {} {}\n",
            self.image_path(frame_i).display(),
            self.image_path(frame_j).display()
        );
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| PointmapError::Provider("provider stdin closed".into()))?;
        stdin
            .write_all(request.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| PointmapError::Provider(format!("request write failed: {e}")))?;
        self.outstanding += 1;

        let deadline = Instant::now() + self.timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            match self.lines.recv_timeout(remaining) {
                Ok(line) => {
                    self.outstanding -= 1;
                    if self.outstanding == 0 {
                        return self.parse_response(&line);
                    }
                    // A straggler from an abandoned request; keep waiting.
                }
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    return Err(PointmapError::Provider(format!(
                        "{} gave no response within {:?}",
                        self.program, self.timeout
                    )));
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => {
                    return Err(PointmapError::Provider(format!(
                        "{} closed its output stream",
                        self.program
                    )));
                }
            }
        }
    }
}

impl Drop for ExternalProcessProvider {
    fn drop(&mut self) {
        // EOF on stdin asks the child to exit; kill covers the ones that
        // don't, so no zombies outlive the provider.
        self.stdin.take();
        let _ = self.child.kill();
        let _ = self.child.wait();
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

/// Serves predictions from a directory of cache files recorded by
/// [`CachingProvider`], keyed by frame pair. No provider is consulted.
pub struct ReplayProvider {
    dir: PathBuf,
}

impl ReplayProvider {
    pub fn new(dir: &Path) -> ReplayProvider {
        ReplayProvider {
            dir: dir.to_path_buf(),
        }
    }
}

impl PointmapProvider for ReplayProvider {
    fn predict(
        &mut self,
        frame_i: &FrameInput,
        frame_j: &FrameInput,
    ) -> Result<PointmapPrediction, PointmapError> {
        let path = self.dir.join(pair_cache_name(frame_i.id, frame_j.id));
        if !path.exists() {
            return Err(PointmapError::Provider(format!(
                "no recorded prediction {}",
                path.display()
            )));
        }
        load_prediction(&path)
    }
}

/// Wraps a provider and records every prediction to `dir`. The returned
/// prediction is re-read from the file it just wrote, so a live run and a
/// later [`ReplayProvider`] run over the same cache see bit-identical
/// arrays (the file stores points at f32 precision).
pub struct CachingProvider<P> {
    inner: P,
    dir: PathBuf,
}

impl<P: PointmapProvider> CachingProvider<P> {
    pub fn new(inner: P, dir: &Path) -> Result<CachingProvider<P>, PointmapError> {
        std::fs::create_dir_all(dir)?;
        Ok(CachingProvider {
            inner,
            dir: dir.to_path_buf(),
        })
    }
}

impl<P: PointmapProvider> PointmapProvider for CachingProvider<P> {
    fn predict(
        &mut self,
        frame_i: &FrameInput,
        frame_j: &FrameInput,
    ) -> Result<PointmapPrediction, PointmapError> {
        let pred = self.inner.predict(frame_i, frame_j)?;
        let path = self.dir.join(pair_cache_name(frame_i.id, frame_j.id));
        save_prediction(&path, &pred)?;
        load_prediction(&path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustic::OccupancyGrid;
    use crate::config::{CameraSection, Config};
    use crate::geometry::{look_at, PinholeCamera, RigidTransform};
    use crate::oracle::{OracleConfig, OracleProvider};
    use crate::pipeline::{FusedCloud, Pipeline};
    use crate::sim::{gen_trajectory, Scene, TrajectoryKind};
    use nalgebra::Vector3;

    fn test_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.camera = CameraSection {
            width: 64,
            height: 48,
            fx: 54.0,
            fy: 54.0,
            cx: 32.0,
            cy: 24.0,
        };
        cfg
    }

    fn truth_grid(cfg: &Config, scene: &Scene) -> OccupancyGrid {
        let mut grid = OccupancyGrid::with_rule(
            Vector3::new(cfg.grid.origin[0], cfg.grid.origin[1], cfg.grid.origin[2]),
            cfg.grid.resolution,
            cfg.grid_dims(),
            cfg.grid.k_hit,
            cfg.grid.r_occ,
        )
        .unwrap();
        for p in scene.surface_samples(0.02, Some(0.95)) {
            if let Some(idx) = grid.world_to_index(&p) {
                for _ in 0..grid.k_hit {
                    grid.record_hit(idx);
                }
            }
        }
        grid
    }

    fn frame_at(scene: &Scene, cam: &PinholeCamera, id: u64, pose: RigidTransform) -> FrameInput {
        let (_, image) = scene.raycast(cam, &pose);
        FrameInput { id, image, pose }
    }

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "optiacoustic_extproc_{tag}_{}",
            std::process::id()
        ));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn write_script(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    /// Responds to each request with the cache file named by the basenames
    /// of the two request images: `<cache>/<i>_<j>.pmpc`.
    fn echo_script(dir: &Path) -> PathBuf {
        write_script(
            dir,
            "echo_provider.sh",
            "#!/bin/sh\nCACHE=\"$1\"\nwhile read cmd pi pj; do\n  i=$(basename \"$pi\" .png)\n  j=$(basename \"$pj\" .png)\n  f=\"$CACHE/${i}_${j}.pmpc\"\n  if [ -f \"$f\" ]; then echo \"OK $f\"; else echo \"ERR missing $f\"; fi\ndone\n",
        )
    }

    fn spawn_sh(
        script: &Path,
        args: &[&str],
        dataset_dir: &Path,
        timeout_ms: u64,
    ) -> ExternalProcessProvider {
        let mut full: Vec<String> = vec![script.display().to_string()];
        full.extend(args.iter().map(|s| s.to_string()));
        ExternalProcessProvider::new(
            "sh",
            &full,
            dataset_dir,
            Duration::from_millis(timeout_ms),
        )
        .unwrap()
    }

    fn run_pipeline(
        cfg: &Config,
        scene: &Scene,
        provider: &mut dyn PointmapProvider,
        n_frames: usize,
    ) -> (FusedCloud, usize) {
        let cam = cfg.pinhole().unwrap();
        let grid = truth_grid(cfg, scene);
        let mut p = Pipeline::new(cfg, cam, grid);
        let poses = gen_trajectory(TrajectoryKind::ObjectCentric, scene, n_frames);
        for (id, pose) in poses.into_iter().enumerate() {
            p.process_frame(provider, frame_at(scene, &cam, id as u64, pose));
        }
        let skipped = p.diagnostics().iter().filter(|d| d.skipped).count();
        (p.export_cloud(), skipped)
    }

    fn clouds_bitwise_equal(a: &FusedCloud, b: &FusedCloud) -> bool {
        a.len() == b.len()
            && a.colors == b.colors
            && a.source == b.source
            && a.points.iter().zip(&b.points).all(|(pa, pb)| {
                pa.x.to_bits() == pb.x.to_bits()
                    && pa.y.to_bits() == pb.y.to_bits()
                    && pa.z.to_bits() == pb.z.to_bits()
            })
    }

    #[test]
    fn echo_provider_matches_in_process_cache() {
        let cfg = test_cfg();
        let cam = cfg.pinhole().unwrap();
        let scene = Scene::benchmark();
        let dir = tmp_dir("echo");
        let cache = dir.join("cache");

        let oracle = OracleProvider::new(scene.clone(), cam, OracleConfig::default());
        let mut live = CachingProvider::new(oracle, &cache).unwrap();
        let (cloud_live, skipped_live) = run_pipeline(&cfg, &scene, &mut live, 6);
        assert_eq!(skipped_live, 0);
        assert!(!cloud_live.is_empty());

        let script = echo_script(&dir);
        let mut external = spawn_sh(&script, &[cache.to_str().unwrap()], &dir, 5000);
        let (cloud_ext, skipped_ext) = run_pipeline(&cfg, &scene, &mut external, 6);
        assert_eq!(skipped_ext, 0);
        assert!(
            clouds_bitwise_equal(&cloud_live, &cloud_ext),
            "external transport changed the output"
        );
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn replay_reproduces_recorded_run_bitwise() {
        let cfg = test_cfg();
        let cam = cfg.pinhole().unwrap();
        let scene = Scene::benchmark();
        let dir = tmp_dir("replay");

        let oracle = OracleProvider::new(scene.clone(), cam, OracleConfig::default());
        let mut live = CachingProvider::new(oracle, &dir).unwrap();
        let (cloud_live, _) = run_pipeline(&cfg, &scene, &mut live, 5);

        let mut replay = ReplayProvider::new(&dir);
        let (cloud_replay, skipped) = run_pipeline(&cfg, &scene, &mut replay, 5);
        assert_eq!(skipped, 0);
        assert!(clouds_bitwise_equal(&cloud_live, &cloud_replay));

        // A pair the recording never saw is a provider error, not a panic.
        let f9 = frame_at(&scene, &cam, 9, look_at(
            Vector3::new(0.4, -0.3, 1.2),
            scene.center(),
            Vector3::z(),
        ));
        let err = replay.predict(&f9, &f9).unwrap_err();
        assert!(err.to_string().contains("000009_000009"), "{err}");
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn caching_provider_round_trips_through_disk() {
        let cfg = test_cfg();
        let cam = cfg.pinhole().unwrap();
        let scene = Scene::benchmark();
        let dir = tmp_dir("roundtrip");
        let pose = look_at(Vector3::new(0.35, -0.25, 1.35), scene.center(), Vector3::z());
        let frame = frame_at(&scene, &cam, 3, pose);

        let oracle = OracleProvider::new(scene.clone(), cam, OracleConfig::default());
        let mut caching = CachingProvider::new(oracle, &dir).unwrap();
        let pred = caching.predict(&frame, &frame).unwrap();
        let reloaded = load_prediction(&dir.join(pair_cache_name(3, 3))).unwrap();
        assert_eq!(pred.c_i, reloaded.c_i);
        for (a, b) in pred.x_ii.iter().zip(&reloaded.x_ii) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.y.to_bits(), b.y.to_bits());
            assert_eq!(a.z.to_bits(), b.z.to_bits());
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn timeout_provider_skips_frames_without_aborting() {
        let cfg = test_cfg();
        let scene = Scene::benchmark();
        let dir = tmp_dir("timeout");
        // Consumes requests, never answers.
        let script = write_script(&dir, "mute.sh", "#!/bin/sh\nexec cat > /dev/null\n");
        let mut provider = spawn_sh(&script, &[], &dir, 150);
        let (cloud, skipped) = run_pipeline(&cfg, &scene, &mut provider, 3);
        assert_eq!(skipped, 3);
        assert!(cloud.is_empty());
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn malformed_and_error_responses_fail_the_prediction() {
        let cfg = test_cfg();
        let cam = cfg.pinhole().unwrap();
        let scene = Scene::benchmark();
        let dir = tmp_dir("malformed");
        let script = write_script(
            &dir,
            "moody.sh",
            "#!/bin/sh\nread a b c; echo \"BANANA\"\nread a b c; echo \"ERR lens fogged\"\n",
        );
        let mut provider = spawn_sh(&script, &[], &dir, 2000);
        let pose = look_at(Vector3::new(0.35, -0.25, 1.35), scene.center(), Vector3::z());
        let frame = frame_at(&scene, &cam, 0, pose);

        let err = provider.predict(&frame, &frame).unwrap_err();
        assert!(err.to_string().contains("malformed"), "{err}");
        let err = provider.predict(&frame, &frame).unwrap_err();
        assert!(err.to_string().contains("lens fogged"), "{err}");
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn corrupt_cache_file_skips_frame_with_diagnostic() {
        let cfg = test_cfg();
        let cam = cfg.pinhole().unwrap();
        let scene = Scene::benchmark();
        let grid = truth_grid(&cfg, &scene);
        let dir = tmp_dir("corrupt");
        let cache = dir.join("cache");
        std::fs::create_dir_all(&cache).unwrap();
        std::fs::write(cache.join(pair_cache_name(0, 0)), b"not a prediction").unwrap();

        let script = echo_script(&dir);
        let mut provider = spawn_sh(&script, &[cache.to_str().unwrap()], &dir, 2000);
        let mut p = Pipeline::new(&cfg, cam, grid);
        let pose = look_at(Vector3::new(0.35, -0.25, 1.35), scene.center(), Vector3::z());
        let d = p.process_frame(&mut provider, frame_at(&scene, &cam, 0, pose));
        assert!(d.skipped);
        assert!(d.note.contains("provider_error"), "note: {}", d.note);
        assert!(d.note.contains("cache"), "note: {}", d.note);
        assert_eq!(p.graph().nodes.len(), 0);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn late_response_resynchronizes_next_prediction() {
        let cfg = test_cfg();
        let cam = cfg.pinhole().unwrap();
        let scene = Scene::benchmark();
        let dir = tmp_dir("late");
        let cache = dir.join("cache");
        std::fs::create_dir_all(&cache).unwrap();

        // Pre-record the two predictions the echo script will name.
        let pose0 = look_at(Vector3::new(0.35, -0.25, 1.35), scene.center(), Vector3::z());
        let pose1 = look_at(Vector3::new(0.6, 0.1, 1.1), scene.center(), Vector3::z());
        let f0 = frame_at(&scene, &cam, 0, pose0);
        let f1 = frame_at(&scene, &cam, 1, pose1);
        let mut oracle = OracleProvider::new(scene.clone(), cam, OracleConfig::default());
        save_prediction(
            &cache.join(pair_cache_name(0, 0)),
            &oracle.predict(&f0, &f0).unwrap(),
        )
        .unwrap();
        save_prediction(
            &cache.join(pair_cache_name(1, 1)),
            &oracle.predict(&f1, &f1).unwrap(),
        )
        .unwrap();

        // First response arrives after the deadline; later ones are instant.
        let script = write_script(
            &dir,
            "slow_start.sh",
            "#!/bin/sh\nCACHE=\"$1\"\nn=0\nwhile read cmd pi pj; do\n  n=$((n+1))\n  if [ \"$n\" = \"1\" ]; then sleep 0.5; fi\n  i=$(basename \"$pi\" .png)\n  j=$(basename \"$pj\" .png)\n  echo \"OK $CACHE/${i}_${j}.pmpc\"\ndone\n",
        );
        let mut provider = spawn_sh(&script, &[cache.to_str().unwrap()], &dir, 120);
        let err = provider.predict(&f0, &f0).unwrap_err();
        assert!(err.to_string().contains("no response"), "{err}");

        // Let the stale response land in the channel, then ask again: the
        // provider must discard it and hand back the answer for (1, 1).
        std::thread::sleep(Duration::from_millis(700));
        provider.timeout = Duration::from_millis(2000);
        let pred = provider.predict(&f1, &f1).unwrap();
        let expected = load_prediction(&cache.join(pair_cache_name(1, 1))).unwrap();
        assert_eq!(pred.c_i, expected.c_i);
        assert_eq!(
            pred.x_ii[100].x.to_bits(),
            expected.x_ii[100].x.to_bits()
        );
        let _ = std::fs::remove_dir_all(&dir);
    }
}
