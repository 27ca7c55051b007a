//! Staged output writing with a content-hash manifest.
//!
//! Commands write every artifact into a hidden staging directory first; the
//! files are renamed into the output directory only after the whole command
//! succeeds, so a failed run never leaves partial outputs behind. The
//! manifest goes in last and lists each output with its SHA-256, alongside
//! the resolved configuration, the seed, crate versions, and wall time.
//! Data files are byte-identical across reruns with the same config and
//! seed; the manifest itself is the one file that is not, because it records
//! wall time.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct OutputEntry {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: &'a BTreeMap<String, String>,
    seed: u64,
    versions: BTreeMap<&'static str, &'static str>,
    wall_time_s: f64,
    outputs: Vec<OutputEntry>,
}

pub struct OutputStage {
    out_dir: PathBuf,
    staging: PathBuf,
    /// (file name, sha256, bytes) in write order.
    files: Vec<(String, String, u64)>,
    committed: bool,
}

impl OutputStage {
    pub fn new(out_dir: &Path) -> io::Result<Self> {
        let staging = out_dir.join(format!(".staging-{}", std::process::id()));
        fs::create_dir_all(&staging)?;
        Ok(Self { out_dir: out_dir.to_path_buf(), staging, files: Vec::new(), committed: false })
    }

    /// Write one artifact into staging and record its hash.
    pub fn add(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        fs::write(self.staging.join(name), bytes)?;
        let digest = Sha256::digest(bytes);
        self.files.push((name.to_string(), format!("{digest:x}"), bytes.len() as u64));
        Ok(())
    }

    /// Move everything into the output directory and write the manifest.
    /// Returns the final paths, manifest last.
    pub fn commit(
        mut self,
        command: &str,
        config: &BTreeMap<String, String>,
        seed: u64,
        wall_time_s: f64,
    ) -> io::Result<Vec<PathBuf>> {
        let mut final_paths = Vec::new();
        let mut outputs = Vec::new();
        for (name, sha256, bytes) in &self.files {
            let dest = self.out_dir.join(name);
            fs::rename(self.staging.join(name), &dest)?;
            outputs.push(OutputEntry { path: name.clone(), sha256: sha256.clone(), bytes: *bytes });
            final_paths.push(dest);
        }
        fs::remove_dir_all(&self.staging).ok();
        self.committed = true;

        let manifest = RunManifest {
            command,
            config,
            seed,
            versions: BTreeMap::from([
                ("quench3d", quench3d::VERSION),
                ("quench3d-cli", env!("CARGO_PKG_VERSION")),
            ]),
            wall_time_s,
            outputs,
        };
        let mut body = serde_json::to_vec_pretty(&manifest)?;
        body.push(b'\n');
        let dest = self.out_dir.join("run_manifest.json");
        fs::write(&dest, body)?;
        final_paths.push(dest);
        Ok(final_paths)
    }
}

impl Drop for OutputStage {
    fn drop(&mut self) {
        if !self.committed {
            fs::remove_dir_all(&self.staging).ok();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_moves_files_and_lists_them_with_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut stage = OutputStage::new(dir.path()).unwrap();
        stage.add("a.csv", b"x,y\n1,2\n").unwrap();
        stage.add("b.json", b"{}\n").unwrap();
        let config = BTreeMap::from([("out.dir".to_string(), "out".to_string())]);
        let paths = stage.commit("winding", &config, 7, 0.25).unwrap();

        assert_eq!(paths.len(), 3);
        assert!(dir.path().join("a.csv").is_file());
        assert!(dir.path().join("b.json").is_file());
        let manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("run_manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["command"], "winding");
        assert_eq!(manifest["seed"], 7);
        assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
        let first = &manifest["outputs"][0];
        assert_eq!(first["path"], "a.csv");
        // Hash must match the actual file content.
        let body = fs::read(dir.path().join("a.csv")).unwrap();
        assert_eq!(first["sha256"], format!("{:x}", Sha256::digest(&body)));
        // No staging leftovers.
        assert!(fs::read_dir(dir.path()).unwrap().all(|e| {
            !e.unwrap().file_name().to_string_lossy().starts_with(".staging")
        }));
    }

    #[test]
    fn dropping_an_uncommitted_stage_removes_partial_outputs() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut stage = OutputStage::new(dir.path()).unwrap();
            stage.add("partial.csv", b"half").unwrap();
            // dropped without commit — simulates a failed command
        }
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
