//! Per-stage manifests: each stage records content hashes of its inputs and
//! a hash of its relevant config sections. Rerunning a stage whose recorded
//! state still matches is a no-op (the manifest file is left untouched)
//! unless `--force` is given.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    /// Content hash per input artifact path.
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing input {}", path.display()))?;
    Ok(hex_digest(&bytes))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn manifest_path(work_dir: &Path, stage: &str) -> PathBuf {
    work_dir.join(format!("manifest_{stage}.json"))
}

/// Builds the manifest a stage run would record.
pub fn build_manifest(
    stage: &str,
    config_sections: &str,
    input_paths: &[PathBuf],
    seed: u64,
    outputs: &[PathBuf],
) -> Result<StageManifest> {
    let mut inputs = BTreeMap::new();
    for path in input_paths {
        inputs.insert(path.display().to_string(), sha256_file(path)?);
    }
    Ok(StageManifest {
        stage: stage.to_string(),
        config_hash: hex_digest(config_sections.as_bytes()),
        inputs,
        seed,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    })
}

/// True when the stage's recorded manifest matches `candidate` and all its
/// outputs still exist.
pub fn is_up_to_date(work_dir: &Path, candidate: &StageManifest) -> bool {
    let path = manifest_path(work_dir, &candidate.stage);
    let Ok(text) = std::fs::read_to_string(&path) else {
        return false;
    };
    let Ok(existing) = serde_json::from_str::<StageManifest>(&text) else {
        return false;
    };
    existing == *candidate && candidate.outputs.iter().all(|o| Path::new(o).exists())
}

pub fn write_manifest(work_dir: &Path, manifest: &StageManifest) -> Result<()> {
    let path = manifest_path(work_dir, &manifest.stage);
    std::fs::write(&path, serde_json::to_string_pretty(manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Exclusive work-dir lock; removed on drop.
pub struct WorkDirLock {
    path: PathBuf,
}

impl WorkDirLock {
    pub fn acquire(work_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(work_dir)
            .with_context(|| format!("creating work dir {}", work_dir.display()))?;
        let path = work_dir.join(".hirec.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(anyhow::anyhow!(
                "work dir {} is locked by another command (remove {} if stale)",
                work_dir.display(),
                path.display()
            )),
            Err(e) => Err(e).with_context(|| format!("locking {}", work_dir.display())),
        }
    }
}

impl Drop for WorkDirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn up_to_date_requires_matching_hashes_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("input.txt");
        std::fs::write(&input, "hello").unwrap();
        let output = dir.path().join("out.bin");
        std::fs::write(&output, "result").unwrap();

        let manifest =
            build_manifest("demo", "[s]\nx=1", &[input.clone()], 7, &[output.clone()]).unwrap();
        assert!(!is_up_to_date(dir.path(), &manifest));
        write_manifest(dir.path(), &manifest).unwrap();
        assert!(is_up_to_date(dir.path(), &manifest));

        // Input content change invalidates.
        std::fs::write(&input, "changed").unwrap();
        let fresh =
            build_manifest("demo", "[s]\nx=1", &[input.clone()], 7, &[output.clone()]).unwrap();
        assert!(!is_up_to_date(dir.path(), &fresh));

        // Config change invalidates.
        let fresh = build_manifest("demo", "[s]\nx=2", &[input], 7, &[output.clone()]).unwrap();
        assert!(!is_up_to_date(dir.path(), &fresh));

        // Missing output invalidates.
        std::fs::remove_file(&output).unwrap();
        let manifest2 = StageManifest {
            outputs: vec![output.display().to_string()],
            ..manifest
        };
        write_manifest(dir.path(), &manifest2).unwrap();
        assert!(!is_up_to_date(dir.path(), &manifest2));
    }

    #[test]
    fn lock_is_exclusive_and_released_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let lock = WorkDirLock::acquire(dir.path()).unwrap();
        assert!(WorkDirLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(WorkDirLock::acquire(dir.path()).is_ok());
    }
}
