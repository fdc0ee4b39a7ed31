use std::fs;
use std::path::Path;

use prdl::loss::LossConfig;
use prdl::mil::{MilConfig, SyntheticBagConfig};
use prdl::prs::StoreConfig;
use prdl::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Every stage reads the same document; each subcommand uses its sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SyntheticBagConfig,
    pub pretrain: TrainConfig,
    pub loss: LossConfig,
    pub store: StoreConfig,
    pub mil: MilConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            CliError::Validation(format!("{}: config key `{key}`: {}", path.display(), e.inner()))
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let section = |name: &str, r: prdl::Result<()>| {
            r.map_err(|e| CliError::Validation(format!("config section `{name}`: {e}")))
        };
        section("data", self.data.validate())?;
        section("pretrain", self.pretrain.validate())?;
        section("loss", self.loss.validate())?;
        section("mil", self.mil.validate())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the compact resolved JSON.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[derive(Serialize)]
struct Echo<'a> {
    command: &'a str,
    seed: Option<u64>,
    config_hash: String,
    config: &'a RunConfig,
}

/// Prints the hash and writes the resolved config into `out`.
pub fn echo(cfg: &RunConfig, command: &str, seed: Option<u64>, out: Option<&Path>) -> Result<String, CliError> {
    let hash = cfg.hash();
    println!("config-hash: {hash}");
    if let Some(dir) = out {
        let path = dir.join(format!("config.{command}.json"));
        let echo = Echo {
            command,
            seed,
            config_hash: hash.clone(),
            config: cfg,
        };
        let text = serde_json::to_string_pretty(&echo).expect("config serialises");
        fs::write(&path, text + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_str(text: &str) -> Result<RunConfig, CliError> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, text).unwrap();
        RunConfig::load(Some(&p))
    }

    #[test]
    fn defaults_fill_missing_fields() {
        let cfg = load_str(r#"{"mil": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.mil.epochs, 3);
        assert_eq!(cfg.pretrain, TrainConfig::default());
        assert_eq!(load_str("{}").unwrap().hash(), RunConfig::default().hash());
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let Err(CliError::Validation(msg)) = load_str(r#"{"pretrain": {"model": {"repr_dimm": 4}}}"#) else {
            panic!("expected a validation error");
        };
        assert!(msg.contains("pretrain.model"), "{msg}");
        assert!(msg.contains("repr_dimm"), "{msg}");
        assert!(matches!(load_str(r#"{"loss": {"gamma": "x"}}"#), Err(CliError::Validation(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let mut cfg = RunConfig::default();
        let h = cfg.hash();
        assert_eq!(h.len(), 64);
        cfg.mil.lr = 0.01;
        assert_ne!(cfg.hash(), h);
    }
}
