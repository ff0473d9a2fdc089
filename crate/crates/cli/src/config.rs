//! Experiment configuration files.

use std::path::Path;

use pekd::trainkit::ProtocolSpec;
use pekd::{Error, Result};

/// The full experiment description; every key has a default and unknown keys are rejected.
pub type Config = ProtocolSpec;

pub fn parse(text: &str) -> Result<Config> {
    let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => parse(&std::fs::read_to_string(p)?),
        None => Ok(Config::default()),
    }
}

pub fn to_toml(cfg: &Config) -> String {
    toml::to_string(cfg).expect("config types serialise to TOML")
}

/// The effective configuration as `#`-prefixed lines, for reproducibility banners.
pub fn banner(cfg: &Config) -> String {
    let mut s = String::from("# effective config\n");
    for line in to_toml(cfg).lines() {
        s.push_str("# ");
        s.push_str(line);
        s.push('\n');
    }
    s
}
