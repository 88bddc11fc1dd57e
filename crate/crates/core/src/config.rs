//! The single run configuration file and the per-run output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::io::write_json;
use crate::losses::LossWeights;
use crate::networks::{CenArchConfig, MmgArchConfig};
use crate::phantom::PhantomSpec;
use crate::preprocessing::PreprocessConfig;
use crate::training::TrainConfig;
use crate::volumetric::{plan_windows, plan_windows_with, Blend, WindowPlan};

/// Environment variable naming the root directory for run outputs.
pub const RUNS_ENV: &str = "SLAMDIMM_RUNS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub subvolume_factor: usize,
    /// Overrides `floor(D/s)`.
    pub window_depth: Option<usize>,
    /// Overrides `floor(D/(2s))`.
    pub stride: Option<usize>,
    pub blend: Blend,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            subvolume_factor: 10,
            window_depth: None,
            stride: None,
            blend: Blend::Uniform,
        }
    }
}

impl WindowConfig {
    pub fn plan(&self, depth: usize) -> Result<WindowPlan> {
        let base = plan_windows(depth, self.subvolume_factor)?;
        if self.window_depth.is_none() && self.stride.is_none() && self.blend == Blend::Uniform {
            return Ok(base);
        }
        let w = self.window_depth.unwrap_or(base.window_depth);
        let stride = self.stride.unwrap_or(if self.window_depth.is_some() { (w / 2).max(1) } else { base.stride });
        plan_windows_with(depth, w, stride, self.blend)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub mmg_arch: MmgArchConfig,
    pub cen_arch: CenArchConfig,
    pub schedule: ScheduleConfig,
    pub inference: InferenceConfig,
    pub windows: WindowConfig,
    pub phantom: PhantomSpec,
}

impl RunConfig {
    /// Reads JSON (`.json`) or TOML (anything else). Unknown keys are errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.mmg_arch.validate()?;
        self.cen_arch.validate()?;
        self.schedule.build()?;
        if self.inference.t_test > self.schedule.steps {
            return Err(Error::Config(format!(
                "inference.t_test {} exceeds schedule steps {}",
                self.inference.t_test, self.schedule.steps
            )));
        }
        if self.windows.subvolume_factor == 0 {
            return Err(Error::Config("windows.subvolume_factor must be >= 1".into()));
        }
        Ok(())
    }

    /// Short content hash of the effective configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// An output directory that is never silently reused.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Root from `SLAMDIMM_RUNS`, falling back to `./runs`.
    pub fn root_from_env() -> PathBuf {
        std::env::var_os(RUNS_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Creates `root/name`. An existing non-empty directory is an error
    /// unless `force`, in which case it is cleared first.
    pub fn create(root: &Path, name: &str, force: bool) -> Result<Self> {
        let path = root.join(name);
        if path.exists() {
            let non_empty = fs::read_dir(&path)
                .map_err(|e| Error::io(&path, e))?
                .next()
                .is_some();
            if non_empty && !force {
                return Err(Error::RunExists(path));
            }
            if non_empty {
                fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }

    pub fn join(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.path.join(rel)
    }

    /// Writes the config echo, version string and seeds.
    pub fn record(&self, cfg: &RunConfig, command: &[String], seeds: &serde_json::Value) -> Result<()> {
        write_json(&self.join("config.json"), cfg)?;
        write_json(&self.join("command.json"), &command)?;
        write_json(&self.join("seeds.json"), seeds)?;
        let version = version_string();
        let p = self.join("version.txt");
        fs::write(&p, format!("{version}\n")).map_err(|e| Error::io(&p, e))
    }
}

/// Crate version plus `git describe` output when available.
pub fn version_string() -> String {
    let describe = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty());
    match describe {
        Some(d) => format!("{} {}", env!("CARGO_PKG_VERSION"), d),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "[loss]\nlambda1 = 3.0\nbogus = 1\n").unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));
        fs::write(&p, "[loss]\nlambda1 = 3.0\n").unwrap();
        assert_eq!(RunConfig::load(&p).unwrap().loss.lambda1, 3.0);
        let j = dir.path().join("c.json");
        fs::write(&j, r#"{"windows":{"subvolume_factor":2}}"#).unwrap();
        assert_eq!(RunConfig::load(&j).unwrap().windows.subvolume_factor, 2);
    }

    #[test]
    fn run_dir_refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let r = RunDir::create(dir.path(), "a", false).unwrap();
        fs::write(r.join("x"), "1").unwrap();
        assert!(matches!(RunDir::create(dir.path(), "a", false), Err(Error::RunExists(_))));
        let r = RunDir::create(dir.path(), "a", true).unwrap();
        assert!(!r.join("x").exists());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.loss.gamma2 = 0.2;
        assert_ne!(a.hash(), b.hash());
    }
}
