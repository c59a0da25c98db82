//! Binary little-endian PLY point clouds: float32 x/y/z plus uint8 RGB.
//! The reader accepts exactly the layout the writer produces, which is the
//! common denominator external viewers load without configuration.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a supported ply file: {0}")]
    Format(String),
    #[error("point and color counts differ: {points} vs {colors}")]
    LengthMismatch { points: usize, colors: usize },
}

/// Writes a binary little-endian PLY file with per-vertex color.
pub fn write_ply(path: &Path, points: &[[f32; 3]], colors: &[[u8; 3]]) -> Result<(), PlyError> {
    if points.len() != colors.len() {
        return Err(PlyError::LengthMismatch { points: points.len(), colors: colors.len() });
    }
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write!(
        f,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    )?;
    for (p, c) in points.iter().zip(colors) {
        for v in p {
            f.write_all(&v.to_le_bytes())?;
        }
        f.write_all(c)?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a PLY file written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<(Vec<[f32; 3]>, Vec<[u8; 3]>), PlyError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(PlyError::Format("missing ply magic".into()));
    }
    let mut count: Option<usize> = None;
    let mut properties = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(PlyError::Format("truncated header".into()));
        }
        let l = line.trim_end();
        if l == "end_header" {
            break;
        }
        if l.starts_with("comment") {
            continue;
        }
        if l == "format binary_little_endian 1.0" {
            continue;
        }
        if let Some(rest) = l.strip_prefix("element vertex ") {
            count = Some(
                rest.parse().map_err(|_| PlyError::Format(format!("bad vertex count {rest:?}")))?,
            );
            continue;
        }
        if let Some(rest) = l.strip_prefix("property ") {
            properties.push(rest.to_string());
            continue;
        }
        return Err(PlyError::Format(format!("unsupported header line {l:?}")));
    }
    let expected = ["float x", "float y", "float z", "uchar red", "uchar green", "uchar blue"];
    if properties != expected {
        return Err(PlyError::Format(format!("unsupported vertex layout {properties:?}")));
    }
    let count = count.ok_or_else(|| PlyError::Format("missing vertex element".into()))?;
    let mut points = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    let mut rec = [0u8; 15];
    for _ in 0..count {
        r.read_exact(&mut rec)?;
        let mut p = [0f32; 3];
        for (a, pv) in p.iter_mut().enumerate() {
            *pv = f32::from_le_bytes(rec[4 * a..4 * a + 4].try_into().unwrap());
        }
        points.push(p);
        colors.push([rec[12], rec[13], rec[14]]);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(PlyError::Format("trailing bytes after vertex data".into()));
    }
    Ok((points, colors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_preserves_points_and_bytes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        let points = vec![[0.5f32, -1.25, 3.0], [1e-4, 2.5, -0.75], [0.0, 0.0, 0.0]];
        let colors = vec![[255u8, 0, 10], [1, 2, 3], [128, 128, 128]];
        write_ply(&path, &points, &colors).unwrap();
        let (p2, c2) = read_ply(&path).unwrap();
        assert_eq!(p2, points);
        assert_eq!(c2, colors);

        // write -> read -> write yields identical bytes
        let path2 = dir.path().join("cloud2.ply");
        write_ply(&path2, &p2, &c2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn empty_cloud_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        write_ply(&path, &[], &[]).unwrap();
        let (p, c) = read_ply(&path).unwrap();
        assert!(p.is_empty() && c.is_empty());
    }

    #[test]
    fn mismatched_lengths_and_garbage_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        assert!(matches!(
            write_ply(&path, &[[0.0; 3]], &[]),
            Err(PlyError::LengthMismatch { .. })
        ));
        std::fs::write(&path, b"not a ply file").unwrap();
        assert!(read_ply(&path).is_err());

        // truncated payload
        let good = dir.path().join("good.ply");
        write_ply(&good, &[[1.0; 3]; 4], &[[0; 3]; 4]).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(read_ply(&path).is_err());
    }
}
