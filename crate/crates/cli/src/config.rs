//! The single per-run configuration file shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use ramil_core::error::{Error, Result};
use ramil_core::joints::model::LandmarkTrainConfig;
use ramil_core::synthetic::SyntheticSpec;
use ramil_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Seed of the split assignment.
    pub split_seed: u64,
    pub spec: SyntheticSpec,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n: 250,
            train_fraction: 0.8,
            val_fraction: 0.0,
            split_seed: 0,
            spec: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: Option<PathBuf>,
    pub synth: SynthSection,
    pub train: TrainConfig,
    pub landmarks: LandmarkTrainConfig,
}

fn prefix(e: Error, p: &str) -> Error {
    match e {
        Error::Config { key, message } => Error::Config {
            key: format!("{p}.{key}"),
            message,
        },
        other => other,
    }
}

fn config_error(key: &str, message: String) -> Error {
    Error::Config { key: key.into(), message }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .map(str::to_string)
                .unwrap_or_else(|| "config".into());
            config_error(&key, msg)
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        resolve(&mut cfg.manifest);
        resolve(&mut cfg.train.joints.spec);
        resolve(&mut cfg.train.joints.noise_sd_file);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.synth;
        if s.n == 0 {
            return Err(config_error("synth.n", "must be positive".into()));
        }
        if !(s.train_fraction >= 0.0 && s.val_fraction >= 0.0 && s.train_fraction + s.val_fraction <= 1.0) {
            return Err(config_error(
                "synth.train_fraction",
                format!("fractions {} + {} must lie in [0, 1]", s.train_fraction, s.val_fraction),
            ));
        }
        s.spec.validate().map_err(|e| prefix(e, "synth.spec"))?;
        self.train.validate().map_err(|e| prefix(e, "train"))?;
        self.landmarks.validate().map_err(|e| prefix(e, "landmarks"))?;
        Ok(())
    }

    /// The manifest from the command line, else from the config.
    pub fn manifest(&self, flag: Option<&Path>) -> Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.manifest.clone())
            .ok_or_else(|| config_error("manifest", "no manifest given on the command line or in the config".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_resolve_against_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "manifest = \"data/m.csv\"\n[train.joints]\nnoise_sd_file = \"sd.txt\"\n").unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.manifest.clone().unwrap(), dir.path().join("data/m.csv"));
        assert_eq!(c.train.joints.noise_sd_file.clone().unwrap(), dir.path().join("sd.txt"));
        assert_eq!(c.manifest(Some(Path::new("/x.csv"))).unwrap(), PathBuf::from("/x.csv"));
    }

    #[test]
    fn errors_carry_prefixed_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        for (text, key) in [
            ("[landmarks]\nepochs = 0\n", "landmarks.epochs"),
            ("[synth]\nn = 0\n", "synth.n"),
            ("[train]\nk = 31\n", "train.k"),
            ("[synth]\nextra = 1\n", "extra"),
        ] {
            fs::write(&p, text).unwrap();
            match RunConfig::load(&p) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(RunConfig::load(&dir.path().join("absent.toml")), Err(Error::MissingArtifact(_))));
        assert!(matches!(RunConfig::default().manifest(None), Err(Error::Config { .. })));
    }
}
