//! A dataset directory and its manifest.
//!
//! ```text
//! <root>/manifest
//!        manifest.lock
//!        calibration.cfg
//!        episodes/<id>.bin
//!        annotations/<id>.ann
//!        targets/<teacher-hash>.tgt
//!        checkpoints/<step>.ckpt
//! ```
//!
//! Every file is replaced by write-temp-then-rename. Manifest updates are
//! read-modify-write under an exclusive lock on `manifest.lock`; readers
//! never lock.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use super::episode::{decode_episode, encode_episode};
use super::targets::{decode_targets_for, encode_targets};
use super::{text, FormatError};
use crate::distill::TeacherTargetSet;
use crate::episode::{EpisodeRecord, Provenance, TaskKind};
use crate::error::{Error, Result};
use crate::reward::{RewardAnnotation, SafetyCalibration};

pub const MANIFEST_MAJOR: u16 = 1;
pub const MANIFEST_MINOR: u16 = 0;
const SIDECAR_MAJOR: u16 = 1;
const SIDECAR_MINOR: u16 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub id: String,
    pub task: TaskKind,
    pub group: String,
    /// SHA-256 of the episode file.
    pub hash: String,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub episode_format: String,
    pub count: usize,
    /// In insertion order.
    pub episodes: Vec<EpisodeEntry>,
    pub calibration_hash: Option<String>,
    /// Episode id to sidecar file hash.
    pub annotations: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn entry(&self, id: &str) -> Option<&EpisodeEntry> {
        self.episodes.iter().find(|e| e.id == id)
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.episodes.iter().map(|e| e.group.clone()).collect();
        g.sort();
        g.dedup();
        g
    }

    /// Hash over the ordered episode hashes.
    pub fn episodes_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.episodes {
            h.update(e.id.as_bytes());
            h.update([0]);
            h.update(e.hash.as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check(&self) -> Result<(), FormatError> {
        if self.count != self.episodes.len() {
            return Err(FormatError::Text(format!(
                "manifest lists {} episodes but records count {}",
                self.episodes.len(),
                self.count
            )));
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn located(path: &Path, e: FormatError) -> Error {
    log::debug!("{}: {e}", path.display());
    match e {
        FormatError::Text(s) => FormatError::Text(format!("{}: {s}", path.display())).into(),
        e => Error::Format(e),
    }
}

/// Writes `bytes` to a temporary sibling, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = dir.join(format!(
        ".{name}.{}.{}.tmp",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DatasetDir {
    root: PathBuf,
}

impl DatasetDir {
    /// Creates the layout, and an empty manifest unless one exists.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let dir = DatasetDir { root: root.into() };
        for sub in ["episodes", "annotations", "targets", "checkpoints"] {
            let p = dir.root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        dir.update_manifest(|_| Ok(()))?;
        Ok(dir)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let dir = DatasetDir { root: root.into() };
        dir.manifest()?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest")
    }

    pub fn episode_path(&self, id: &str) -> PathBuf {
        self.root.join("episodes").join(format!("{id}.bin"))
    }

    pub fn annotation_path(&self, id: &str) -> PathBuf {
        self.root.join("annotations").join(format!("{id}.ann"))
    }

    pub fn calibration_path(&self) -> PathBuf {
        self.root.join("calibration.cfg")
    }

    pub fn targets_path(&self, teacher_hash: &str) -> PathBuf {
        self.root.join("targets").join(format!("{teacher_hash}.tgt"))
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("{step}.ckpt"))
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let path = self.manifest_path();
        let raw = read_file(&path)?;
        let text = String::from_utf8(raw).map_err(|e| {
            located(
                &path,
                FormatError::Malformed {
                    section: "manifest".into(),
                    offset: e.utf8_error().valid_up_to() as u64,
                    detail: "invalid UTF-8".into(),
                },
            )
        })?;
        let (_, m): (u16, DatasetManifest) =
            text::decode(&text, text::MANIFEST, MANIFEST_MAJOR).map_err(|e| located(&path, e))?;
        m.check().map_err(|e| located(&path, e))?;
        Ok(m)
    }

    /// Read-modify-write of the manifest under the advisory lock.
    pub fn update_manifest<R>(&self, f: impl FnOnce(&mut DatasetManifest) -> Result<R>) -> Result<R> {
        let lock_path = self.root.join("manifest.lock");
        let lock = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| Error::io(&lock_path, e))?;
        lock.lock().map_err(|e| Error::io(&lock_path, e))?;
        let mut m = if self.manifest_path().exists() {
            self.manifest()?
        } else {
            DatasetManifest {
                episode_format: format!("{}.{}", super::episode::MAJOR, super::episode::MINOR),
                ..DatasetManifest::default()
            }
        };
        let out = f(&mut m)?;
        m.count = m.episodes.len();
        let text = text::encode(text::MANIFEST, MANIFEST_MAJOR, MANIFEST_MINOR, &m)?;
        write_atomic(&self.manifest_path(), text.as_bytes())?;
        Ok(out)
    }

    /// Writes episode files and registers them; an existing id is replaced
    /// and its sidecar dropped.
    pub fn write_episodes(&self, episodes: &[EpisodeRecord]) -> Result<()> {
        let mut entries = Vec::with_capacity(episodes.len());
        for ep in episodes {
            let bytes = encode_episode(ep)?;
            write_atomic(&self.episode_path(&ep.id), &bytes)?;
            entries.push(EpisodeEntry {
                id: ep.id.clone(),
                task: ep.task,
                group: ep.group.clone(),
                hash: sha256_hex(&bytes),
                provenance: ep.provenance.clone(),
            });
        }
        self.update_manifest(|m| {
            for e in entries {
                m.annotations.remove(&e.id);
                match m.episodes.iter_mut().find(|x| x.id == e.id) {
                    Some(slot) => *slot = e,
                    None => m.episodes.push(e),
                }
            }
            Ok(())
        })
    }

    fn read_verified(&self, path: &Path, expected: &str) -> Result<Vec<u8>> {
        let bytes = read_file(path)?;
        let found = sha256_hex(&bytes);
        if found != expected {
            return Err(located(
                path,
                FormatError::HashMismatch {
                    file: path.display().to_string(),
                    expected: expected.into(),
                    found,
                },
            ));
        }
        Ok(bytes)
    }

    pub fn read_episode(&self, id: &str) -> Result<EpisodeRecord> {
        let m = self.manifest()?;
        let entry = m
            .entry(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no episode `{id}` in {}", self.root.display())))?;
        let path = self.episode_path(id);
        let bytes = self.read_verified(&path, &entry.hash)?;
        decode_episode(&bytes).map_err(|e| located(&path, e))
    }

    /// All episodes in manifest order.
    pub fn read_episodes(&self) -> Result<Vec<EpisodeRecord>> {
        let m = self.manifest()?;
        m.episodes
            .iter()
            .map(|e| {
                let path = self.episode_path(&e.id);
                let bytes = self.read_verified(&path, &e.hash)?;
                decode_episode(&bytes).map_err(|err| located(&path, err))
            })
            .collect()
    }

    /// Stores the calibration; sidecars made under another one are dropped
    /// from the manifest.
    pub fn write_calibration(&self, calib: &SafetyCalibration) -> Result<String> {
        let hash = calib.content_hash();
        let text = text::encode(text::CALIBRATION, SIDECAR_MAJOR, SIDECAR_MINOR, calib)?;
        self.update_manifest(|m| {
            write_atomic(&self.calibration_path(), text.as_bytes())?;
            if m.calibration_hash.as_deref() != Some(hash.as_str()) {
                m.annotations.clear();
            }
            m.calibration_hash = Some(hash.clone());
            Ok(())
        })?;
        Ok(hash)
    }

    pub fn read_calibration(&self) -> Result<SafetyCalibration> {
        let m = self.manifest()?;
        let expected = m
            .calibration_hash
            .ok_or_else(|| Error::InvalidArgument(format!("{} is not calibrated", self.root.display())))?;
        let path = self.calibration_path();
        let raw = String::from_utf8_lossy(&read_file(&path)?).into_owned();
        let (_, calib): (u16, SafetyCalibration) =
            text::decode(&raw, text::CALIBRATION, SIDECAR_MAJOR).map_err(|e| located(&path, e))?;
        let found = calib.content_hash();
        if found != expected {
            return Err(FormatError::CalibrationMismatch { expected, found }.into());
        }
        Ok(calib)
    }

    /// Writes the sidecar for `id`; refused unless the annotation was made
    /// under the dataset's current calibration.
    pub fn attach_annotation(&self, id: &str, ann: &RewardAnnotation) -> Result<()> {
        if ann.episode_id != id {
            return Err(Error::InvalidArgument(format!(
                "annotation for `{}` attached to `{id}`",
                ann.episode_id
            )));
        }
        let text = text::encode(text::ANNOTATION, SIDECAR_MAJOR, SIDECAR_MINOR, ann)?;
        self.update_manifest(|m| {
            if m.entry(id).is_none() {
                return Err(Error::InvalidArgument(format!(
                    "no episode `{id}` in {}",
                    self.root.display()
                )));
            }
            let current = m.calibration_hash.clone().unwrap_or_default();
            if ann.calibration_hash != current {
                return Err(FormatError::CalibrationMismatch {
                    expected: current,
                    found: ann.calibration_hash.clone(),
                }
                .into());
            }
            write_atomic(&self.annotation_path(id), text.as_bytes())?;
            m.annotations.insert(id.to_string(), sha256_hex(text.as_bytes()));
            Ok(())
        })
    }

    pub fn read_annotation(&self, id: &str) -> Result<RewardAnnotation> {
        let m = self.manifest()?;
        let expected = m
            .annotations
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("episode `{id}` has no current annotation")))?;
        let path = self.annotation_path(id);
        let bytes = self.read_verified(&path, expected)?;
        let raw = String::from_utf8_lossy(&bytes);
        let (_, ann): (u16, RewardAnnotation) =
            text::decode(&raw, text::ANNOTATION, SIDECAR_MAJOR).map_err(|e| located(&path, e))?;
        Ok(ann)
    }

    /// Annotations for every episode, in manifest order.
    pub fn read_annotations(&self) -> Result<Vec<RewardAnnotation>> {
        let m = self.manifest()?;
        m.episodes.iter().map(|e| self.read_annotation(&e.id)).collect()
    }

    pub fn write_targets(&self, set: &TeacherTargetSet) -> Result<PathBuf> {
        let path = self.targets_path(&set.teacher_hash);
        write_atomic(&path, &encode_targets(set)?)?;
        Ok(path)
    }

    pub fn read_targets(&self, teacher_hash: &str, dataset_hash: &str) -> Result<TeacherTargetSet> {
        let path = self.targets_path(teacher_hash);
        decode_targets_for(&read_file(&path)?, dataset_hash).map_err(|e| located(&path, e))
    }

    pub fn write_checkpoint(&self, ck: &Checkpoint) -> Result<PathBuf> {
        let path = self.checkpoint_path(ck.meta.step);
        write_checkpoint_file(&path, ck)?;
        Ok(path)
    }
}

pub fn write_checkpoint_file(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn read_checkpoint_file(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?).map_err(|e| located(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::DemoKind;
    use crate::reward::{annotate_episode, calibrate, CalibrationConfig, RewardWeights};
    use crate::sim::{scripted_demo, SimConfig};

    fn demos(n: u64) -> Vec<EpisodeRecord> {
        let cfg = SimConfig::default();
        (0..n)
            .map(|i| {
                let kind = [DemoKind::Clean, DemoKind::OverForce, DemoKind::WeakGrip][i as usize % 3];
                let task = TaskKind::ALL[i as usize % TaskKind::ALL.len()];
                scripted_demo(kind, task, &cfg, i).unwrap()
            })
            .collect()
    }

    #[test]
    fn annotate_then_reload() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = DatasetDir::create(tmp.path().join("d")).unwrap();
        let eps = demos(6);
        dir.write_episodes(&eps).unwrap();
        assert_eq!(dir.read_episodes().unwrap(), eps);

        let calib = calibrate(&eps, &CalibrationConfig::default()).unwrap();
        dir.write_calibration(&calib).unwrap();
        assert_eq!(dir.read_calibration().unwrap(), calib);
        let ann = annotate_episode(&eps[0], &calib, &RewardWeights::default()).unwrap();
        dir.attach_annotation(&eps[0].id, &ann).unwrap();
        assert_eq!(dir.read_annotation(&eps[0].id).unwrap(), ann);

        let mut stale = ann.clone();
        stale.calibration_hash = "0".repeat(64);
        assert!(matches!(
            dir.attach_annotation(&eps[0].id, &stale).unwrap_err(),
            Error::Format(FormatError::CalibrationMismatch { .. })
        ));
        assert!(dir
            .attach_annotation(
                "missing",
                &RewardAnnotation {
                    episode_id: "missing".into(),
                    ..ann
                }
            )
            .is_err());
    }

    #[test]
    fn tampered_episode_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = DatasetDir::create(tmp.path()).unwrap();
        let eps = demos(1);
        dir.write_episodes(&eps).unwrap();
        let path = dir.episode_path(&eps[0].id);
        let mut bytes = fs::read(&path).unwrap();
        bytes[100] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            dir.read_episode(&eps[0].id).unwrap_err(),
            Error::Format(FormatError::HashMismatch { .. })
        ));
    }

    #[test]
    fn concurrent_annotators_all_land() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = DatasetDir::create(tmp.path()).unwrap();
        let eps = demos(12);
        dir.write_episodes(&eps).unwrap();
        let calib = calibrate(&eps, &CalibrationConfig::default()).unwrap();
        dir.write_calibration(&calib).unwrap();

        std::thread::scope(|s| {
            for ep in &eps {
                let (calib, root) = (&calib, tmp.path());
                s.spawn(move || {
                    let own = DatasetDir::open(root).unwrap();
                    let ann = annotate_episode(ep, calib, &RewardWeights::default()).unwrap();
                    own.attach_annotation(&ep.id, &ann).unwrap();
                });
            }
        });

        let m = dir.manifest().unwrap();
        assert_eq!(m.count, 12);
        assert_eq!(m.annotations.len(), 12);
        let anns = dir.read_annotations().unwrap();
        for (ep, ann) in eps.iter().zip(anns) {
            assert_eq!(ann, annotate_episode(ep, &calib, &RewardWeights::default()).unwrap());
        }
        let leftovers: Vec<_> = fs::read_dir(tmp.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn recalibration_drops_stale_sidecars() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = DatasetDir::create(tmp.path()).unwrap();
        let eps = demos(3);
        dir.write_episodes(&eps).unwrap();
        let calib = calibrate(&eps, &CalibrationConfig::default()).unwrap();
        dir.write_calibration(&calib).unwrap();
        let ann = annotate_episode(&eps[1], &calib, &RewardWeights::default()).unwrap();
        dir.attach_annotation(&eps[1].id, &ann).unwrap();
        let mut other = calib.clone();
        other.f_max *= 1.5;
        dir.write_calibration(&other).unwrap();
        assert!(dir.read_annotation(&eps[1].id).is_err());
    }
}
