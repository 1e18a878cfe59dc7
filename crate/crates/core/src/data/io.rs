//! Trajectory (JSON lines) and window (binary) files.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Trajectory, TrajectoryWindow};
use crate::env::{ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::trajmod::RtgTrajectory;

pub const WINDOW_MAGIC: &[u8; 4] = b"TJWN";
pub const WINDOW_VERSION: u32 = 1;

/// Sidecar written next to every dataset file as `<file>.manifest.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub file: String,
    pub sha256: String,
    pub count: u64,
    pub env_config_hash: String,
    pub config_hash: String,
    pub seed: u64,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_with_manifest(path: &Path, bytes: &[u8], count: u64, env_hash: &str, config_hash: &str, seed: u64) -> Result<Manifest> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let manifest = Manifest {
        file: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: hex::encode(Sha256::digest(bytes)),
        count,
        env_config_hash: env_hash.to_string(),
        config_hash: config_hash.to_string(),
        seed,
    };
    let mp = manifest_path(path);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mp = manifest_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Checks the file against its manifest when one exists.
fn verify(path: &Path, bytes: &[u8]) -> Result<()> {
    if !manifest_path(path).exists() {
        return Ok(());
    }
    let m = read_manifest(path)?;
    let actual = hex::encode(Sha256::digest(bytes));
    if actual != m.sha256 {
        return Err(Error::Corrupt(format!(
            "{}: checksum {actual} does not match manifest {}",
            path.display(),
            m.sha256
        )));
    }
    Ok(())
}

/// One JSON record per line, plus a manifest.
pub fn write_trajectories(
    path: &Path,
    trajs: &[Trajectory],
    env_hash: &str,
    config_hash: &str,
    seed: u64,
) -> Result<Manifest> {
    let mut buf = Vec::new();
    for t in trajs {
        serde_json::to_writer(&mut buf, t)?;
        buf.push(b'\n');
    }
    write_with_manifest(path, &buf, trajs.len() as u64, env_hash, config_hash, seed)
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    verify(path, &bytes)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line)
            .map_err(|e| Error::Corrupt(format!("{} line {}: {e}", path.display(), i + 1)))?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

fn window_bytes(windows: &[TrajectoryWindow]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WINDOW_MAGIC);
    buf.extend_from_slice(&WINDOW_VERSION.to_le_bytes());
    buf.extend_from_slice(&(windows.len() as u64).to_le_bytes());
    for w in windows {
        let t = &w.traj;
        if t.state_dim != STATE_DIM || t.action_dim != ACTION_DIM {
            return Err(Error::Dimension("window file stores 4-D states and 2-D actions".into()));
        }
        let start = u16::try_from(t.start).map_err(|_| Error::Window(format!("start {} exceeds 65535", t.start)))?;
        let len = u16::try_from(t.len()).map_err(|_| Error::Window(format!("length {} exceeds 65535", t.len())))?;
        buf.extend_from_slice(&w.episode.to_le_bytes());
        buf.extend_from_slice(&start.to_le_bytes());
        buf.extend_from_slice(&len.to_le_bytes());
        for s in 0..t.len() {
            buf.extend_from_slice(&t.rtgs[s].to_le_bytes());
            for v in t.state(s).iter().chain(t.action(s)) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&w.weights[s].to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_windows(
    path: &Path,
    windows: &[TrajectoryWindow],
    env_hash: &str,
    config_hash: &str,
    seed: u64,
) -> Result<Manifest> {
    let buf = window_bytes(windows)?;
    write_with_manifest(path, &buf, windows.len() as u64, env_hash, config_hash, seed)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt(format!(
                "window file truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads a window file. The format carries no rewards: they are recovered
/// from consecutive returns-to-go, and the last step of each window gets 0.
pub fn read_windows(path: &Path) -> Result<Vec<TrajectoryWindow>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    verify(path, &bytes)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4)? != WINDOW_MAGIC {
        return Err(Error::Corrupt(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != WINDOW_VERSION {
        return Err(Error::Corrupt(format!("{}: unsupported version {version}", path.display())));
    }
    let count = r.u64()?;
    let mut out = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let episode = r.u32()?;
        let start = r.u16()? as usize;
        let n = r.u16()? as usize;
        let mut rtgs = Vec::with_capacity(n);
        let mut states = Vec::with_capacity(n * STATE_DIM);
        let mut actions = Vec::with_capacity(n * ACTION_DIM);
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            rtgs.push(r.f32()?);
            for _ in 0..STATE_DIM {
                states.push(r.f32()?);
            }
            for _ in 0..ACTION_DIM {
                actions.push(r.f32()?);
            }
            weights.push(r.f32()?);
        }
        let mut rewards: Vec<f32> = rtgs.windows(2).map(|p| p[0] - p[1]).collect();
        if n > 0 {
            rewards.push(0.0);
        }
        out.push(TrajectoryWindow {
            episode,
            traj: RtgTrajectory::new(start, STATE_DIM, ACTION_DIM, states, actions, rewards, rtgs)?,
            weights,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_windows, CurationConfig, TrajectoryMeta};
    use crate::par::Exec;

    fn dataset() -> Vec<Trajectory> {
        (0..3)
            .map(|e| Trajectory {
                meta: TrajectoryMeta {
                    policy: "p".into(),
                    seed: 1,
                    episode: e,
                },
                states: (0..30).map(|i| [i as f32 / 30.0, -0.5, 0.1, 0.0]).collect(),
                actions: (0..30).map(|i| [0.25, -(i as f32) / 60.0]).collect(),
                rewards: (0..30).map(|i| if i > 20 { 1.0 } else { 0.0 }).collect(),
            })
            .collect()
    }

    #[test]
    fn trajectories_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let d = dataset();
        let m = write_trajectories(&p, &d, "env", "cfg", 9).unwrap();
        assert_eq!(m.count, 3);
        assert_eq!(read_trajectories(&p).unwrap(), d);
        assert_eq!(read_manifest(&p).unwrap(), m);
        let mut bytes = fs::read(&p).unwrap();
        bytes[10] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_trajectories(&p), Err(Error::Corrupt(_))));
    }

    #[test]
    fn windows_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        let cfg = CurationConfig {
            window: 5,
            stride: 4,
            ..Default::default()
        };
        let w = sample_windows(&dataset(), &cfg, Exec::Sequential).unwrap();
        write_windows(&p, &w, "env", "cfg", 0).unwrap();
        let back = read_windows(&p).unwrap();
        assert_eq!(back.len(), w.len());
        for (a, b) in w.iter().zip(&back) {
            assert_eq!(a.episode, b.episode);
            assert_eq!(a.traj.start, b.traj.start);
            assert_eq!(a.traj.states, b.traj.states);
            assert_eq!(a.traj.actions, b.traj.actions);
            assert_eq!(a.traj.rtgs, b.traj.rtgs);
            assert_eq!(a.weights, b.weights);
        }
        let header = fs::read(&p).unwrap();
        assert_eq!(&header[..4], b"TJWN");
        // Truncated copy without a manifest.
        let q = dir.path().join("t.bin");
        fs::write(&q, &header[..header.len() - 3]).unwrap();
        assert!(matches!(read_windows(&q), Err(Error::Corrupt(_))));
        fs::write(&q, b"XXXX").unwrap();
        assert!(matches!(read_windows(&q), Err(Error::Corrupt(_))));
    }
}
