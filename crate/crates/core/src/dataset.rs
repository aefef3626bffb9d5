//! Dataset splits on disk: one trajectory directory per sample plus a
//! manifest listing them.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mpm::generate_trajectory;
use crate::trajectory::{read_file, read_trajectory, write_file, write_trajectory, Trajectory};

pub const MANIFEST: &str = "manifest.json";
pub const SCRATCH_ENV: &str = "EQCOLLIDE_SCRATCH";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub id: String,
    pub seed: u64,
    pub content_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub split: String,
    pub config_hash: String,
    pub n_objects: usize,
    pub entries: Vec<SplitEntry>,
}

/// Seed of sample `index` in `split`, independent of worker scheduling.
pub fn sample_seed(base: u64, split: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(split.as_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

fn staging_root(out: &Path) -> PathBuf {
    match std::env::var_os(SCRATCH_ENV) {
        Some(s) if !s.is_empty() => PathBuf::from(s),
        _ => out.join(".staging"),
    }
}

fn move_dir(from: &Path, to: &Path) -> Result<()> {
    if to.exists() {
        fs::remove_dir_all(to).map_err(|e| Error::io(to, e))?;
    }
    if fs::rename(from, to).is_ok() {
        return Ok(());
    }
    // Different filesystems: copy the flat directory, then drop the source.
    fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    for entry in fs::read_dir(from).map_err(|e| Error::io(from, e))? {
        let entry = entry.map_err(|e| Error::io(from, e))?;
        let dst = to.join(entry.file_name());
        fs::copy(entry.path(), &dst).map_err(|e| Error::io(&dst, e))?;
    }
    fs::remove_dir_all(from).map_err(|e| Error::io(from, e))
}

/// Generate `count` trajectories into `root/split`. Each sample is written to
/// a staging directory first and moved into place only when complete.
pub fn generate_split(
    cfg: &RunConfig,
    root: &Path,
    split: &str,
    count: usize,
    workers: usize,
) -> Result<SplitManifest> {
    if split.is_empty() || split.contains(['/', '\\']) || split.starts_with('.') {
        return Err(Error::validation(format!("invalid split name `{split}`")));
    }
    let out = root.join(split);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let staging = staging_root(&out);
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let d = &cfg.datagen;
    let job = |i: usize| -> Result<SplitEntry> {
        let id = format!("traj_{i:05}");
        let seed = sample_seed(d.seed, split, i);
        let traj = generate_trajectory(seed, d.n_objects, d.points_per_object, d.n_frames, &cfg.mpm, &cfg.scene)?;
        let tmp = staging.join(format!("{split}-{id}"));
        let hash = write_trajectory(&traj, &tmp)?;
        move_dir(&tmp, &out.join(&id))?;
        Ok(SplitEntry {
            id,
            seed,
            content_sha256: hash,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<SplitEntry>> = pool.install(|| (0..count).into_par_iter().map(job).collect());
    let entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    if staging.ends_with(".staging") {
        let _ = fs::remove_dir(&staging);
    }
    let manifest = SplitManifest {
        split: split.to_string(),
        config_hash: cfg.hash(),
        n_objects: d.n_objects,
        entries,
    };
    write_file(&out.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_split_manifest(dir: &Path) -> Result<SplitManifest> {
    Ok(serde_json::from_slice(&read_file(&dir.join(MANIFEST))?)?)
}

/// Load every sample of a split directory in manifest order.
pub fn load_split(dir: &Path) -> Result<Vec<(String, Trajectory)>> {
    let manifest = read_split_manifest(dir)?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let traj = read_trajectory(&dir.join(&e.id))?;
        if traj.provenance.content_sha256 != e.content_sha256 {
            return Err(Error::format(
                "content_sha256",
                format!("sample {} does not match the split manifest", e.id),
            ));
        }
        out.push((e.id.clone(), traj));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_run() -> RunConfig {
        RunConfig::from_json(
            r#"{"datagen": {"n_objects": 2, "points_per_object": 40, "n_frames": 3}, "mpm": {"grid_resolution": 32}}"#,
            &[],
        )
        .unwrap()
    }

    #[test]
    fn parallel_and_serial_generation_agree() {
        let cfg = small_run();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_split(&cfg, a.path(), "train", 3, 1).unwrap();
        let mb = generate_split(&cfg, b.path(), "train", 3, 3).unwrap();
        assert_eq!(ma, mb);
        let loaded = load_split(&a.path().join("train")).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded[1].0, "traj_00001");
        assert!(!a.path().join("train/.staging").exists());
    }

    #[test]
    fn seeds_differ_by_split_and_index() {
        assert_ne!(sample_seed(0, "train", 0), sample_seed(0, "test", 0));
        assert_ne!(sample_seed(0, "train", 0), sample_seed(0, "train", 1));
    }
}
