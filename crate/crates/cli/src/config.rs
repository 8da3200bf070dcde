//! Config files and flag merging.
//!
//! Every command accepts `--config <file>`: a TOML file whose keys are the
//! command's long flag names with `-` replaced by `_`. A value given on the
//! command line wins over the file, which wins over the built-in default.
//! Relative paths inside a config file are resolved against the file's
//! directory.
//!
//! When `--config` is a relative path that does not exist, it is looked up
//! in `$PACKETLM_CONFIG_DIR`. Without `--config`, `$PACKETLM_CONFIG_DIR/<command>.toml`
//! is used if present.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use crate::error::{CliError, CliResult};

pub const CONFIG_DIR_ENV: &str = "PACKETLM_CONFIG_DIR";

fn locate(explicit: Option<&Path>, command: &str) -> CliResult<Option<PathBuf>> {
    let dir = std::env::var_os(CONFIG_DIR_ENV).map(PathBuf::from);
    match explicit {
        Some(p) if p.exists() => Ok(Some(p.to_path_buf())),
        Some(p) => match dir.map(|d| d.join(p)).filter(|c| p.is_relative() && c.exists()) {
            Some(found) => Ok(Some(found)),
            None => Err(CliError::Usage(format!("config file {} not found", p.display()))),
        },
        None => Ok(dir.map(|d| d.join(format!("{command}.toml"))).filter(|c| c.exists())),
    }
}

/// Loads the config for `command`, or `T::default()` when there is none.
/// Returns the directory relative paths in the file are resolved against.
pub fn load_config<T: DeserializeOwned + Default>(explicit: Option<&Path>, command: &str) -> CliResult<(T, PathBuf)> {
    match locate(explicit, command)? {
        None => Ok((T::default(), PathBuf::new())),
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let value = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((value, base))
        }
    }
}

/// Resolves a path read from a config file against its directory.
pub fn rebase(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() || base.as_os_str().is_empty() {
        p
    } else {
        base.join(p)
    }
}

/// `flag`, else the file's value, else nothing.
pub fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

/// Like [`pick`] for paths, rebasing the file's value.
pub fn pick_path(flag: Option<PathBuf>, file: Option<PathBuf>, base: &Path) -> Option<PathBuf> {
    flag.or_else(|| file.map(|p| rebase(base, p)))
}

/// Fails with a usage error naming the missing setting.
pub fn require<T>(v: Option<T>, name: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Usage(format!("missing required setting `{name}` (flag --{} or config key {name})", name.replace('_', "-"))))
}

/// Parses seed lists such as `1..10` (inclusive), `1,2,5` or `3`.
pub fn parse_seeds(spec: &str) -> CliResult<Vec<u64>> {
    let bad = || CliError::Usage(format!("cannot parse seed list {spec:?}"));
    let spec = spec.trim();
    if let Some((a, b)) = spec.split_once("..") {
        let lo: u64 = a.trim().parse().map_err(|_| bad())?;
        let hi: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if hi < lo {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    let seeds: Vec<u64> = spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<CliResult<_>>()?;
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}
