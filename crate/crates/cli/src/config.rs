//! Config overlay: built-in defaults, then an optional TOML or JSON file,
//! then command-line flags. The resolved result is written next to the
//! outputs so a run can be repeated from that file alone.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const DATA_DIR_ENV: &str = "AMTL_DATA_DIR";
pub const RESOLVED_CONFIG: &str = "config.json";

/// Default root for every output path.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("amtl-data"))
}

pub fn models_dir() -> PathBuf {
    data_root().join("models")
}

/// Reads a config file as a generic value; `.toml` files are parsed as
/// TOML, anything else as JSON.
pub fn load_value(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(anyhow::Error::from)
    } else {
        serde_json::from_str(&text).map_err(anyhow::Error::from)
    };
    parsed.with_context(|| format!("parsing config {}", path.display()))
}

fn merge(dst: &mut serde_json::Value, src: serde_json::Value) {
    match (dst, src) {
        (serde_json::Value::Object(d), serde_json::Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

/// `defaults` with every field present in `file` replaced, recursively.
pub fn overlay<T: Serialize + DeserializeOwned>(defaults: T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else {
        return Ok(defaults);
    };
    let mut value = serde_json::to_value(&defaults)?;
    merge(&mut value, load_value(path)?);
    serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))
}

/// Overwrites `dst` when the flag was given.
pub fn set<T>(dst: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *dst = v;
    }
}

pub fn write_resolved<T: Serialize>(path: &Path, cfg: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(cfg)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `dir/stem.suffix` for a file `dir/stem.ext`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Demo {
        a: u32,
        b: String,
    }

    #[test]
    fn nested_tables_merge_field_by_field() {
        let mut d = serde_json::json!({"m": {"x": 1, "y": 2}, "z": 3});
        merge(&mut d, serde_json::json!({"m": {"y": 5}}));
        assert_eq!(d, serde_json::json!({"m": {"x": 1, "y": 5}, "z": 3}));
    }

    #[test]
    fn toml_and_json_overlay_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        fs::write(&t, "a = 3\n").unwrap();
        let j = dir.path().join("c.json");
        fs::write(&j, r#"{"b": "x"}"#).unwrap();
        assert_eq!(overlay(Demo::default(), Some(&j)).unwrap(), Demo { a: 0, b: "x".into() });
        assert!(overlay(Demo::default(), Some(&dir.path().join("missing.json"))).is_err());
        let mut d = overlay(Demo { a: 1, b: "keep".into() }, Some(&t)).unwrap();
        set(&mut d.a, Some(9));
        set(&mut d.b, None);
        assert_eq!(d, Demo { a: 9, b: "keep".into() });
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(sibling(Path::new("m/den.ckpt"), "losses.csv"), PathBuf::from("m/den.losses.csv"));
    }
}
