//! Output directories guarded by a run manifest.

use std::path::{Path, PathBuf};

use ragfuse::train::RunManifest;

use crate::error::CliError;

pub const RUN_MANIFEST: &str = "manifest.json";
pub const STATUS_COMPLETE: &str = "complete";
pub const STATUS_FAILED: &str = "failed";

pub struct RunDir {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

/// What to do with an output directory that may already hold a run.
pub enum Opened {
    Fresh(RunDir),
    /// `--resume` on a completed run; nothing to do.
    AlreadyComplete(PathBuf),
}

fn read_status(path: &Path) -> Result<Option<String>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(ragfuse::Error::from)?;
    Ok(Some(
        v.get("status")
            .and_then(|s| s.as_str())
            .unwrap_or("unknown")
            .to_string(),
    ))
}

impl RunDir {
    /// Creates `dir` and writes a `running` manifest before any heavy work.
    pub fn open(dir: &Path, resume: bool, manifest: RunManifest) -> Result<Opened, CliError> {
        let path = dir.join(RUN_MANIFEST);
        match (read_status(&path)?, resume) {
            (Some(s), true) if s == STATUS_COMPLETE => return Ok(Opened::AlreadyComplete(dir.to_path_buf())),
            (Some(s), false) => {
                return Err(CliError::Exists(format!(
                    "{} already holds a {s} run; pass --resume to continue it",
                    dir.display()
                )))
            }
            _ => {}
        }
        std::fs::create_dir_all(dir)?;
        let run = RunDir {
            dir: dir.to_path_buf(),
            manifest,
        };
        run.write()?;
        Ok(Opened::Fresh(run))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self) -> Result<(), CliError> {
        Ok(self.manifest.write(&self.dir.join(RUN_MANIFEST))?)
    }

    /// Writes `contents` to `name` and lists it in the manifest.
    pub fn emit(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        std::fs::write(self.path(name), contents)?;
        self.record(name);
        Ok(())
    }

    pub fn record(&mut self, name: &str) {
        if !self.manifest.outputs.iter().any(|o| o == name) {
            self.manifest.outputs.push(name.to_string());
        }
    }

    pub fn complete(mut self, results: serde_json::Value) -> Result<(), CliError> {
        self.manifest.status = STATUS_COMPLETE.into();
        self.manifest.results = results;
        self.write()
    }

    /// Removes everything this run wrote except the manifest, which is
    /// marked failed with the error message.
    pub fn fail(mut self, err: &CliError) {
        for name in self.manifest.outputs.drain(..) {
            let _ = std::fs::remove_file(self.dir.join(name));
        }
        self.manifest.status = STATUS_FAILED.into();
        self.manifest
            .notes
            .insert("error".into(), format!("{}: {err}", err.kind()));
        let _ = self.write();
    }
}

/// Runs `body` inside an opened run directory, marking the run failed when
/// it returns an error.
pub fn guarded(
    dir: &Path,
    resume: bool,
    manifest: RunManifest,
    body: impl FnOnce(&mut RunDir) -> Result<serde_json::Value, CliError>,
) -> Result<(), CliError> {
    let mut run = match RunDir::open(dir, resume, manifest)? {
        Opened::Fresh(run) => run,
        Opened::AlreadyComplete(dir) => {
            eprintln!("{} is already complete; nothing to do", dir.display());
            return Ok(());
        }
    };
    match body(&mut run) {
        Ok(results) => run.complete(results),
        Err(e) => {
            run.fail(&e);
            Err(e)
        }
    }
}
