use std::path::{Path, PathBuf};

use crate::config::{StageConfig, RUNS_DIR_ENV};
use crate::error::{Error, Result};

/// Root of all run directories: `$SLIMMAT_RUNS_DIR`, or `runs`.
pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// `<root>/<name>/{config.toml, checkpoints/, logs/, report.md, report.csv}`.
///
/// Stages of one experiment share a directory; each stage owns its checkpoint
/// and its frozen config under `logs/`.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn named(name: &str) -> Result<Self> {
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(Error::InvalidArgument(format!("invalid run name `{name}`")));
        }
        Ok(Self::at(runs_root().join(name)))
    }

    pub fn at(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.ckpt"))
    }

    pub fn log(&self, file: &str) -> PathBuf {
        self.root.join("logs").join(file)
    }

    pub fn report_md(&self) -> PathBuf {
        self.root.join("report.md")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    /// Creates the directory for `stage`. Refuses when the stage's checkpoint
    /// already exists, unless `force`.
    pub fn begin_stage(&self, stage: &str, cfg: &StageConfig, force: bool) -> Result<()> {
        let ckpt = self.checkpoint(stage);
        if ckpt.exists() && !force {
            return Err(Error::WouldOverwrite(ckpt));
        }
        std::fs::create_dir_all(self.root.join("checkpoints"))?;
        std::fs::create_dir_all(self.root.join("logs"))?;
        let text = cfg.to_toml_string()?;
        if !self.config_path().exists() {
            std::fs::write(self.config_path(), &text)?;
        }
        std::fs::write(self.log(&format!("{stage}.config.toml")), text)?;
        Ok(())
    }

    pub fn write_log(&self, file: &str, text: &str) -> Result<()> {
        std::fs::create_dir_all(self.root.join("logs"))?;
        std::fs::write(self.log(file), text)?;
        Ok(())
    }
}
