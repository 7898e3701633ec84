//! Output directories appear only once complete: work happens in a sibling
//! `<name>.partial` that is renamed into place at the end.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::Usage;

const RUN_FILE: &str = "run.json";

#[derive(Debug, Serialize, Deserialize)]
struct RunStamp {
    command: String,
    key: String,
}

pub struct OutDir {
    target: PathBuf,
    work: PathBuf,
    replace: bool,
}

pub enum Prepared {
    /// `--resume` found a finished run with the same key.
    UpToDate(PathBuf),
    Fresh(OutDir),
}

fn partial_of(target: &Path) -> PathBuf {
    let mut name = target.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    target.with_file_name(name)
}

fn stamp_matches(dir: &Path, key: &str) -> bool {
    std::fs::read_to_string(dir.join(RUN_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<RunStamp>(&t).ok())
        .is_some_and(|s| s.key == key)
}

impl OutDir {
    /// Claims `target` for one command run.
    ///
    /// An existing `target` is an error unless `force` (replace it on success)
    /// or `resume` (continue from its stages) is given.
    pub fn prepare(target: &Path, key: &str, force: bool, resume: bool) -> Result<Prepared> {
        if target.as_os_str().is_empty() {
            return Err(Usage("--out must not be empty".into()).into());
        }
        let work = partial_of(target);
        let exists = target.exists();
        if exists && resume && stamp_matches(target, key) {
            return Ok(Prepared::UpToDate(target.to_path_buf()));
        }
        if exists && !force && !resume {
            return Err(Usage(format!(
                "{} already exists; pass --force to overwrite or --resume to continue",
                target.display()
            ))
            .into());
        }
        if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
        if resume && exists {
            if work.exists() {
                std::fs::remove_dir_all(&work)?;
            }
            std::fs::rename(target, &work)
                .with_context(|| format!("moving {} aside", target.display()))?;
        } else if work.exists() && !resume {
            std::fs::remove_dir_all(&work)
                .with_context(|| format!("removing stale {}", work.display()))?;
        }
        std::fs::create_dir_all(&work).with_context(|| format!("creating {}", work.display()))?;
        Ok(Prepared::Fresh(OutDir {
            target: target.to_path_buf(),
            work,
            replace: exists && force && !resume,
        }))
    }

    /// Where the command writes its artifacts.
    pub fn path(&self) -> &Path {
        &self.work
    }

    /// Drops a failed run's work directory, unless it holds finished stages
    /// that `--resume` can pick up.
    pub fn abandon(self) {
        if !self.work.join("stages").exists() {
            let _ = std::fs::remove_dir_all(&self.work);
        }
    }

    /// Stamps the run and moves it into place.
    pub fn commit(self, command: &str, key: &str) -> Result<PathBuf> {
        let stamp = RunStamp {
            command: command.to_string(),
            key: key.to_string(),
        };
        std::fs::write(
            self.work.join(RUN_FILE),
            serde_json::to_string_pretty(&stamp)?,
        )?;
        if self.replace && self.target.exists() {
            std::fs::remove_dir_all(&self.target)
                .with_context(|| format!("removing old {}", self.target.display()))?;
        }
        std::fs::rename(&self.work, &self.target)
            .with_context(|| format!("moving output into {}", self.target.display()))?;
        Ok(self.target)
    }
}
