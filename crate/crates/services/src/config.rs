//! Settings shared by the servers and the on-disk deployment file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// `Full` enforces sequences and contexts; `Plain` is OAuth with PoP tokens only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Full,
    Plain,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Mode::Full),
            "plain" | "plain-oauth" => Ok(Mode::Plain),
            other => Err(format!("unknown mode '{other}' (expected full or plain)")),
        }
    }
}

/// A resource server as the AS knows it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RsRoute {
    pub id: String,
    pub url: String,
    /// Application whose unqualified actions run on this server.
    pub application: String,
}

/// Key and certificate files of one principal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityFiles {
    pub key: PathBuf,
    pub cert: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsFileConfig {
    pub listen: String,
    pub public_url: String,
    pub identity: IdentityFiles,
    pub tls: IdentityFiles,
    #[serde(default = "default_ttl")]
    pub master_ttl_secs: i64,
    #[serde(default = "default_ttl")]
    pub eso_ttl_secs: i64,
    pub policies: PathBuf,
    pub subjects: PathBuf,
    pub eso_registry: PathBuf,
    pub admin_token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RsFileConfig {
    pub id: String,
    pub listen: String,
    pub public_url: String,
    pub application: String,
    pub identity: IdentityFiles,
    pub tls: IdentityFiles,
    pub objects: PathBuf,
    pub counter_log: Option<PathBuf>,
    /// Seconds an introspection answer may be reused; only for benchmarking.
    #[serde(default)]
    pub introspect_cache_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EsoFileConfig {
    pub listen: String,
    pub public_url: String,
    pub identity: IdentityFiles,
    pub tls: IdentityFiles,
    pub logins: PathBuf,
    pub admin_token: String,
}

/// Everything `seqcap-server` needs to start a deployment from disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentFile {
    #[serde(default)]
    pub mode: Mode,
    pub root_cert: PathBuf,
    pub auth_server: AsFileConfig,
    pub eso_server: EsoFileConfig,
    pub resource_servers: Vec<RsFileConfig>,
    /// Client identities, for tools that act as those clients.
    #[serde(default)]
    pub clients: BTreeMap<String, IdentityFiles>,
}

fn default_ttl() -> i64 {
    86_400
}

impl DeploymentFile {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<(), String> {
        let text = toml::to_string_pretty(self).map_err(|e| e.to_string())?;
        std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parses() {
        assert_eq!("plain-oauth".parse::<Mode>().unwrap(), Mode::Plain);
        assert!("fast".parse::<Mode>().is_err());
    }
}
