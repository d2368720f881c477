//! Output staging and the held-out split format.
//!
//! Every artifact is written as `<name>.partial` and renamed only once the
//! whole command has succeeded, so a failed run leaves its unfinished outputs
//! visibly marked.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub const PARTIAL_SUFFIX: &str = ".partial";

pub fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(PARTIAL_SUFFIX);
    PathBuf::from(s)
}

/// Writes `bytes` to `<path>.partial`, then renames it to `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = partial_path(path);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming {}", tmp.display()))
}

/// Collects outputs of a multi-file command as partial files.
#[derive(Debug, Default)]
pub struct Staged {
    files: Vec<PathBuf>,
}

impl Staged {
    pub fn new() -> Self {
        Self::default()
    }

    /// Path to write for final destination `path`.
    pub fn stage(&mut self, path: PathBuf) -> PathBuf {
        let tmp = partial_path(&path);
        self.files.push(path);
        tmp
    }

    pub fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        let tmp = self.stage(path);
        std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))
    }

    /// Renames every staged file into place.
    pub fn commit(self) -> Result<Vec<PathBuf>> {
        for f in &self.files {
            let tmp = partial_path(f);
            std::fs::rename(&tmp, f).with_context(|| format!("renaming {}", tmp.display()))?;
        }
        Ok(self.files)
    }
}

/// One held-out image and its entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalLabel {
    pub image_id: String,
    pub entity_id: String,
}

impl EvalLabel {
    /// `image_id \t entity_id`; blank and `#` lines are skipped.
    pub fn parse(text: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(image_id), Some(entity_id), None) = (cols.next(), cols.next(), cols.next())
            else {
                bail!(
                    "eval split line {}: expected 2 tab-separated columns",
                    i + 1
                );
            };
            if image_id.is_empty() || entity_id.is_empty() {
                bail!("eval split line {}: empty field", i + 1);
            }
            if !seen.insert(image_id.to_string()) {
                bail!("eval split line {}: duplicate image {image_id:?}", i + 1);
            }
            out.push(EvalLabel {
                image_id: image_id.into(),
                entity_id: entity_id.into(),
            });
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Vec<Self>> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_tsv(labels: &[Self]) -> String {
        labels
            .iter()
            .map(|l| format!("{}\t{}\n", l.image_id, l.entity_id))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_labels_round_trip() {
        let labels = vec![
            EvalLabel {
                image_id: "h1".into(),
                entity_id: "Q1".into(),
            },
            EvalLabel {
                image_id: "h2".into(),
                entity_id: "Q2".into(),
            },
        ];
        assert_eq!(
            EvalLabel::parse(&EvalLabel::to_tsv(&labels)).unwrap(),
            labels
        );
        assert!(EvalLabel::parse("a\tb\tc\n").is_err());
        assert!(EvalLabel::parse("a\n").is_err());
        assert!(EvalLabel::parse("a\tb\na\tc\n").is_err());
    }

    #[test]
    fn staged_files_appear_on_commit() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Staged::new();
        let p = dir.path().join("x.txt");
        s.write(p.clone(), b"hi").unwrap();
        assert!(!p.exists());
        assert!(partial_path(&p).exists());
        s.commit().unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"hi");
        assert!(!partial_path(&p).exists());
    }
}
