#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use onh_core::synthetic::{synthetic_corpus, write_corpus};

/// Small trunk so a full pipeline runs in seconds.
pub const SMALL_CONFIG: &str = r#"
[network]
input_resolution = 32
base_filters = 4
encoder_levels = 5

[guide]
guide_levels = 4
fusion_levels = [2, 4]

[data.augment]
multiplier = 1
"#;

pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    /// Corpus of `n` synthetic eyes with a 32-pixel ROI plus the small config.
    pub fn new(n: usize, seed: u64) -> Workspace {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&dir.path().join("data"), &synthetic_corpus(n, 32, seed)).unwrap();
        fs::write(dir.path().join("small.toml"), SMALL_CONFIG).unwrap();
        Workspace { dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn manifest(&self) -> PathBuf {
        self.path("data/manifest.csv")
    }

    pub fn config(&self) -> PathBuf {
        self.path("small.toml")
    }

    /// Runs `onh <args>` and returns the exit code.
    pub fn onh(&self, args: &[&str]) -> i32 {
        let mut argv = vec!["onh".to_string()];
        argv.extend(args.iter().map(|s| s.to_string()));
        onh_cli::run(argv)
    }
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(rd) = fs::read_dir(dir) {
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(files_under(&p));
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

pub fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}
